import numpy as np

from dmnn.topology import MBV2, RESNET, BlockSpec, NetworkSpec, StemSpec


def random_spec(seed: int) -> NetworkSpec:
    """Small random mixed bottleneck / inverted-residual network."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    stem_c = int(rng.choice([4, 8]))
    blocks = []
    c_in = stem_c
    for stage in range(1, int(rng.integers(2, 4)) + 1):
        stride = int(rng.choice([1, 2])) if stage > 1 else 1
        if rng.random() < 0.5:
            c_out = c_in if stride == 1 and rng.random() < 0.5 else int(rng.choice([8, 12, 16]))
            blocks.append(BlockSpec(RESNET, c_in, c_out, stride, n, stage, c1=int(rng.integers(3, 9)),
                                    c2=int(rng.integers(3, 9))))
        else:
            c_out = c_in if stride == 1 and rng.random() < 0.5 else int(rng.choice([8, 12]))
            blocks.append(BlockSpec(MBV2, c_in, c_out, stride, n, stage, expansion=float(rng.choice([2, 3]))))
        c_in = c_out
    stem = StemSpec(stem_c, int(rng.choice([1, 3])), int(rng.choice([1, 2])), pool=bool(rng.random() < 0.5))
    return NetworkSpec(f"rand{seed}", stem, tuple(blocks), 5, 3, int(rng.choice([8, 9, 12])), hidden_dim=6)


def category_column_means(rates: dict) -> np.ndarray:
    """Mean over all (block, sub-block) rows of each coarse-category column."""
    return np.array([np.concatenate(rates[c]).mean() for c in sorted(rates)])
