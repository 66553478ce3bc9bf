import math
import zlib

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Seed substreams
# Every random draw in the toolkit comes from a generator seeded with mix64(seed, ordinal), where the
# ordinal names the replicate, stratum, group or epoch. A substream therefore never depends on how
# many other substreams were consumed before it, and serial and parallel runs agree.

def mix64(seed, ordinal=0):
    """splitmix64 finalizer applied to seed + (ordinal + 1) * golden gamma, modulo 2**64."""
    z = (int(seed) + (int(ordinal) + 1) * GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed, name):
    # stage names map to ordinals through crc32 so adding a stage never shifts the others
    return mix64(master_seed, zlib.crc32(name.encode('utf-8')))


def rng_for(seed, ordinal=0):
    return np.random.default_rng(mix64(seed, ordinal))


def check_seed(seed):
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed

# Report cell formatting

def format_count(count):
    return f"{int(count):,}"


def format_count_pct(count, total):
    if total == 0:
        return f"{int(count):,} (0)"
    return f"{int(count):,} ({100.0 * count / total:.0f})"


def format_mean_sd(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return "-"
    if values.size == 1:
        return f"{values[0]:.0f} ± 0"
    return f"{values.mean():.0f} ± {values.std(ddof=1):.0f}"


def format_ci(point, lo, hi, digits=2):
    if point is None or not math.isfinite(point):
        return "n/a"
    return f"{point:.{digits}f} ({lo:.{digits}f}-{hi:.{digits}f})"


def format_p_value(p, tier=""):
    marker = "" if tier == "ns" else tier
    if p < 1e-4:
        return f"<0.0001{marker}"
    if p >= 0.1:
        return f"{p:.2f}{marker}"
    return f"{p:.2g}{marker}"


def to_builtin(value):
    """Recursively convert numpy scalars/arrays and non-finite floats into JSON-safe builtins."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_builtin(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value
