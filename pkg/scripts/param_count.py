"""Print the parameter count of the full-size configuration and a per-part breakdown."""

from collections import Counter

from tecswin.unet import ModelConfig, TecSwinUNet


def main():
    model = TecSwinUNet(ModelConfig.full(), None)
    parts = Counter()
    for name, p in model.named_parameters():
        parts[name.split(".")[0]] += p.size
    total = sum(parts.values())
    for part, n in parts.most_common():
        print(f"{part:<16} {n / 1e6:9.3f}M")
    print(f"{'total':<16} {total / 1e6:9.3f}M  (target 341M, deviation {(total - 341e6) / 341e6:+.2%})")


if __name__ == "__main__":
    main()
