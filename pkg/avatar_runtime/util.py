import hashlib
import json
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np


class NumpyJSONEncoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (set, frozenset)):
            return sorted(o)
        return super().default(o)


def canonical_json(obj) -> str:
    """Sorted-key compact JSON; the form digests are taken over."""
    return json.dumps(obj, cls=NumpyJSONEncoder, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> bytes:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).digest()


def parse_key_values(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# Latent statistics
# ---------------------------------------------------------------------------

def channel_stats(latents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and variance over every frame and token."""
    flat = np.asarray(latents).reshape(-1, np.shape(latents)[-1])
    return flat.mean(axis=0), flat.var(axis=0)


def stat_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mean_a - mean_b|| + ||var_a - var_b|| over channels."""
    mean_a, var_a = channel_stats(a)
    mean_b, var_b = channel_stats(b)
    return float(np.linalg.norm(mean_a - mean_b) + np.linalg.norm(var_a - var_b))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines: List[str] = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"



# End of file
