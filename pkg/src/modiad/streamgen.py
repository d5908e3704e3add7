"""Synthetic multimodal feature streams.

Stands in for frozen 2D/3D feature extractors. Every class owns a planted
linear relation ``e3d = A_c @ e2d + offset_c (+ noise)`` between its patch
features; a learned mapper pair can recover it from normal samples only.
Anomalies break the relation inside a rectangle of the patch grid.

Clients hold a fixed subset of classes, a long-term stock per class, and an
accumulating local pool fed by Dirichlet-composed packets each round.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptionError, InvalidInputError

DEFECT_KINDS = ("swap", "offset")


@dataclass(frozen=True)
class ClassGenerator:
    class_id: int
    relation: np.ndarray  # (d3d, d2d)
    offset: np.ndarray  # (d3d,)
    mean2d: np.ndarray  # (d2d,)
    scale2d: float
    noise_sigma: float
    grid: int
    basis: np.ndarray | None = None  # (d2d, latent) orthonormal; None = full-rank 2D features

    @property
    def d2d(self) -> int:
        return self.relation.shape[1]

    @property
    def d3d(self) -> int:
        return self.relation.shape[0]

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def condition_number(self) -> float:
        """Condition number of the relation on the subspace the 2D features span."""
        sv = np.linalg.svd(self.relation, compute_uv=False)
        k = len(sv) if self.basis is None else self.basis.shape[1]
        return float(sv[0] / sv[k - 1])


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureSample:
    class_id: int
    e2d: np.ndarray
    e3d: np.ndarray
    mask: np.ndarray | None = None
    is_anomalous: bool = False

    def __post_init__(self):
        if self.e2d.shape[0] != self.e3d.shape[0]:
            raise InvalidInputError("2D and 3D grids must have the same number of patches")
        if (self.mask is not None) != self.is_anomalous:
            raise InvalidInputError("a mask is present exactly when the sample is anomalous")
        if self.mask is not None:
            side = self.mask.shape[0]
            if self.mask.shape != (side, side) or side * side != self.e2d.shape[0]:
                raise InvalidInputError(f"mask shape {self.mask.shape} does not fit {self.e2d.shape[0]} patches")
            if not self.mask.any():
                raise InvalidInputError("an anomalous sample needs a non-empty mask")

    @property
    def grid(self) -> int:
        return math.isqrt(self.e2d.shape[0])


def make_generators(n_classes, d2d, d3d, grid, rng, *, noise_sigma=0.05, cond_bound=4.0,
                    mean_scale=0.5, offset_scale=0.5, scale2d=1.0, latent_dim=None) -> list[ClassGenerator]:
    """Random well-conditioned relations, one per class.

    Singular values are spread evenly on ``[1, cond_bound]`` and rescaled so
    that ``A @ x`` has about the same norm as ``x``. With ``latent_dim`` the 2D
    features vary only inside a random ``latent_dim``-dimensional subspace and
    the relation's row space is that subspace, so 3D features determine the 2D
    ones too (both mapping directions are learnable).
    """
    if cond_bound < 1:
        raise ConfigError("cond_bound must be >= 1", key="stream.cond_bound")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0", key="stream.noise_sigma")
    if latent_dim is not None and not 1 <= latent_dim <= min(d2d, d3d):
        raise ConfigError(f"latent_dim must lie in 1..{min(d2d, d3d)}", key="stream.latent_dim")
    k = min(d2d, d3d) if latent_dim is None else latent_dim
    gens = []
    for c in range(n_classes):
        u, _ = np.linalg.qr(rng.standard_normal((d3d, d3d)))
        v, _ = np.linalg.qr(rng.standard_normal((d2d, d2d)))
        s = np.linspace(1.0, cond_bound, k)
        s *= math.sqrt(d3d / np.sum(s ** 2))
        rel = (u[:, :k] * s) @ v[:, :k].T
        basis = None if latent_dim is None else _frozen(v[:, :k] * math.sqrt(d2d / k))
        gens.append(ClassGenerator(
            class_id=c,
            relation=_frozen(rel),
            offset=_frozen(rng.standard_normal(d3d) * offset_scale),
            mean2d=_frozen(rng.standard_normal(d2d) * mean_scale),
            scale2d=float(scale2d),
            noise_sigma=float(noise_sigma),
            grid=int(grid),
            basis=basis,
        ))
    return gens


def _normal_features(gen: ClassGenerator, rng):
    if gen.basis is None:
        e2d = gen.mean2d + gen.scale2d * rng.standard_normal((gen.n_patches, gen.d2d))
    else:
        z = rng.standard_normal((gen.n_patches, gen.basis.shape[1]))
        e2d = gen.mean2d + gen.scale2d * z @ gen.basis.T
    e3d = e2d @ gen.relation.T + gen.offset
    if gen.noise_sigma > 0:
        e3d = e3d + gen.noise_sigma * rng.standard_normal(e3d.shape)
    return e2d, e3d


def generate_normal(gen: ClassGenerator, rng) -> FeatureSample:
    e2d, e3d = _normal_features(gen, rng)
    return FeatureSample(gen.class_id, _frozen(e2d), _frozen(e3d))


@dataclass(frozen=True)
class DefectSpec:
    """A rectangular defect; ``swap`` uses another class's relation, ``offset`` shifts 3D features."""

    kind: str
    top: int
    left: int
    height: int
    width: int
    magnitude: float = 0.0
    direction: np.ndarray | None = None
    swap_relation: np.ndarray | None = None
    swap_offset: np.ndarray | None = None

    def mask(self, grid: int) -> np.ndarray:
        if self.height <= 0 or self.width <= 0:
            raise InvalidInputError("defect rectangle must have positive area")
        if self.top < 0 or self.left < 0 or self.top + self.height > grid or self.left + self.width > grid:
            raise InvalidInputError(f"defect rectangle does not fit a {grid}x{grid} grid")
        m = np.zeros((grid, grid), dtype=bool)
        m[self.top:self.top + self.height, self.left:self.left + self.width] = True
        return m


@dataclass(frozen=True)
class DefectConfig:
    min_size: int = 2
    max_size: int | None = None  # default grid // 2
    offset_magnitude: float = 1.5
    kinds: tuple = DEFECT_KINDS


def random_defect(gen: ClassGenerator, generators, rng, cfg: DefectConfig = DefectConfig()) -> DefectSpec:
    grid = gen.grid
    hi = cfg.max_size if cfg.max_size is not None else max(cfg.min_size, grid // 2)
    hi = min(hi, grid)
    h = int(rng.integers(cfg.min_size, hi + 1))
    w = int(rng.integers(cfg.min_size, hi + 1))
    top = int(rng.integers(0, grid - h + 1))
    left = int(rng.integers(0, grid - w + 1))
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    others = [g for g in generators if g.class_id != gen.class_id]
    if kind == "swap" and not others:
        kind = "offset"
    if kind == "swap":
        other = others[int(rng.integers(len(others)))]
        return DefectSpec("swap", top, left, h, w, swap_relation=other.relation, swap_offset=other.offset)
    direction = rng.standard_normal(gen.d3d)
    direction /= np.linalg.norm(direction)
    return DefectSpec("offset", top, left, h, w, magnitude=cfg.offset_magnitude, direction=direction)


def generate_anomalous(gen: ClassGenerator, rng, defect: DefectSpec) -> FeatureSample:
    mask = defect.mask(gen.grid)
    e2d, e3d = _normal_features(gen, rng)
    rows = mask.ravel()
    if defect.kind == "swap":
        swapped = e2d[rows] @ defect.swap_relation.T + defect.swap_offset
        if gen.noise_sigma > 0:
            swapped = swapped + gen.noise_sigma * rng.standard_normal(swapped.shape)
        e3d[rows] = swapped
    elif defect.kind == "offset":
        e3d[rows] = e3d[rows] + defect.magnitude * np.asarray(defect.direction)
    else:
        raise InvalidInputError(f"unknown defect kind {defect.kind!r}")
    return FeatureSample(gen.class_id, _frozen(e2d), _frozen(e3d), _frozen(mask, bool), True)


# --- client/class assignment ---------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    client_classes: tuple  # per client, sorted class ids

    @property
    def class_clients(self) -> dict:
        out = {}
        for k, classes in enumerate(self.client_classes):
            for c in classes:
                out.setdefault(c, []).append(k)
        return out


def assign_classes(n_clients, n_classes, per_client, share, rng, *, swaps=None) -> Assignment:
    """Random bi-regular client/class assignment.

    Starts from a round-robin layout and applies random degree-preserving
    edge swaps, then relabels clients and classes at random.
    """
    if n_clients * per_client != n_classes * share:
        raise ConfigError(
            f"K*per_client = {n_clients * per_client} must equal C*share = {n_classes * share}",
            key="topology",
        )
    if per_client > n_classes or share > n_clients or per_client < 1 or share < 1:
        raise ConfigError("need 1 <= per_client <= C and 1 <= share <= K", key="topology")
    slots = [c for c in range(n_classes) for _ in range(share)]
    sets = [set() for _ in range(n_clients)]
    for i, c in enumerate(slots):
        sets[i % n_clients].add(c)
    edges = [(k, c) for k in range(n_clients) for c in sorted(sets[k])]
    for _ in range(swaps if swaps is not None else 10 * len(edges)):
        i, j = rng.integers(len(edges), size=2)
        (k1, c1), (k2, c2) = edges[i], edges[j]
        if k1 == k2 or c1 == c2 or c2 in sets[k1] or c1 in sets[k2]:
            continue
        sets[k1].remove(c1)
        sets[k1].add(c2)
        sets[k2].remove(c2)
        sets[k2].add(c1)
        edges[i], edges[j] = (k1, c2), (k2, c1)
    client_perm = rng.permutation(n_clients)
    class_perm = rng.permutation(n_classes)
    relabeled = [None] * n_clients
    for k in range(n_clients):
        relabeled[client_perm[k]] = tuple(sorted(int(class_perm[c]) for c in sets[k]))
    return Assignment(tuple(relabeled))


# --- client pools and packets --------------------------------------------------


@dataclass
class ClientPool:
    """Long-term stock per class and the accumulated local dataset."""

    client: int
    remaining: dict
    samples: dict = field(default_factory=dict)

    @classmethod
    def with_stock(cls, client: int, classes, per_class: int) -> "ClientPool":
        return cls(client, {c: int(per_class) for c in classes}, {c: [] for c in classes})

    def counts(self) -> dict:
        """``N_{k,c}``: accumulated sample count per class."""
        return {c: len(v) for c, v in self.samples.items()}

    def available(self) -> list:
        return sorted(c for c, v in self.samples.items() if v)

    def add(self, class_id: int, new_samples) -> None:
        self.samples[class_id] = self.samples.get(class_id, []) + list(new_samples)

    def copy(self) -> "ClientPool":
        return ClientPool(self.client, dict(self.remaining), {c: list(v) for c, v in self.samples.items()})


def largest_remainder(weights, total: int, caps) -> list[int]:
    """Split ``total`` into integers proportional to ``weights`` without exceeding ``caps``.

    Leftover from capped entries is redistributed over the others in further
    passes; fractional leftovers go to the largest remainders (ties: lower index).
    """
    weights = np.asarray(weights, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    total = int(min(total, caps.sum()))
    out = np.zeros(len(weights), dtype=np.int64)
    left = total
    while left > 0:
        open_ = out < caps
        w = np.where(open_, weights, 0.0)
        if w.sum() <= 0:
            w = open_.astype(np.float64)
        quota = w / w.sum() * left
        base = np.minimum(np.floor(quota).astype(np.int64), caps - out)
        out += base
        left -= int(base.sum())
        if left == 0:
            break
        frac = np.where(out < caps, quota - np.floor(quota), -1.0)
        order = sorted(range(len(frac)), key=lambda i: (-frac[i], i))
        for i in order:
            if left == 0 or frac[i] < 0:
                break
            if out[i] < caps[i]:
                out[i] += 1
                left -= 1
    return [int(x) for x in out]


def draw_packet(pool: ClientPool, alpha_dirichlet: float, cap: int, rng) -> list[tuple[int, int]]:
    """Draw this round's packet composition and take it from the long-term stock.

    Returns ``[(class_id, count), ...]`` for classes receiving samples. The
    caller generates the features and appends them with ``pool.add``.
    """
    if cap < 0:
        raise InvalidInputError("packet cap must be >= 0")
    if alpha_dirichlet <= 0:
        raise ConfigError("Dirichlet concentration must be > 0", key="stream.dirichlet_alpha")
    classes = sorted(c for c, n in pool.remaining.items() if n > 0)
    if not classes or cap == 0:
        return []
    props = rng.dirichlet([alpha_dirichlet] * len(classes))
    stock = [pool.remaining[c] for c in classes]
    counts = largest_remainder(props, cap, stock)
    packet = []
    for c, n in zip(classes, counts):
        if n:
            pool.remaining[c] -= n
            packet.append((c, n))
    return packet


# --- evaluation sets -----------------------------------------------------------


@dataclass(frozen=True)
class EvalSplit:
    validation: tuple
    test: tuple


def build_labeled_set(gen, generators, n_normal, n_anomalous, rng, defect_cfg=DefectConfig()):
    normals = [generate_normal(gen, rng) for _ in range(n_normal)]
    anomalies = [generate_anomalous(gen, rng, random_defect(gen, generators, rng, defect_cfg))
                 for _ in range(n_anomalous)]
    return tuple(normals + anomalies)


def build_eval_sets(generators, n_normal, n_anomalous, val_rng, test_rng=None,
                    defect_cfg: DefectConfig = DefectConfig()) -> dict:
    """Per-class validation and test sets (normal samples first, then anomalies)."""
    if n_normal < 0 or n_anomalous < 0:
        raise InvalidInputError("sample counts must be >= 0")
    test_rng = test_rng if test_rng is not None else val_rng
    out = {}
    for gen in generators:
        val = build_labeled_set(gen, generators, n_normal, n_anomalous, val_rng, defect_cfg)
        test = build_labeled_set(gen, generators, n_normal, n_anomalous, test_rng, defect_cfg)
        out[gen.class_id] = EvalSplit(val, test)
    return out


# --- snapshot format -----------------------------------------------------------

SNAPSHOT_FORMAT = "modiad-samples"
SNAPSHOT_VERSION = 1


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Run lengths over the row-major flattened mask, starting with a False run."""
    flat = mask.ravel()
    runs, current, length = [], False, 0
    for v in flat:
        if bool(v) == current:
            length += 1
        else:
            runs.append(length)
            current, length = not current, 1
    runs.append(length)
    return runs


def rle_to_mask(runs, grid: int) -> np.ndarray:
    flat = np.zeros(grid * grid, dtype=bool)
    pos, value = 0, False
    for n in runs:
        if n < 0 or pos + n > flat.size:
            raise CorruptionError("mask run lengths overflow the grid")
        flat[pos:pos + n] = value
        pos += n
        value = not value
    if pos != flat.size:
        raise CorruptionError("mask run lengths do not cover the grid")
    return flat.reshape(grid, grid)


def write_snapshot(stream, samples, *, d2d: int, d3d: int, grid: int) -> None:
    """One JSON header line, then one JSON line per sample. Floats round-trip exactly."""
    header = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "d2d": d2d, "d3d": d3d,
              "grid": grid, "count": len(samples)}
    stream.write(json.dumps(header, sort_keys=True) + "\n")
    for s in samples:
        rec = {
            "class": s.class_id,
            "anomalous": s.is_anomalous,
            "mask_rle": mask_to_rle(s.mask) if s.mask is not None else None,
            "e2d": s.e2d.ravel().tolist(),
            "e3d": s.e3d.ravel().tolist(),
        }
        stream.write(json.dumps(rec) + "\n")


def read_snapshot(stream) -> tuple[dict, list[FeatureSample]]:
    lines = [ln for ln in stream.read().splitlines() if ln.strip()]
    if not lines:
        raise CorruptionError("empty snapshot")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"bad snapshot header: {exc}") from exc
    if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
        raise CorruptionError(f"unsupported snapshot header {header}")
    d2d, d3d, grid = header["d2d"], header["d3d"], header["grid"]
    if len(lines) - 1 != header.get("count", len(lines) - 1):
        raise CorruptionError(f"header announces {header['count']} samples, found {len(lines) - 1}")
    samples = []
    for i, line in enumerate(lines[1:], 1):
        try:
            rec = json.loads(line)
            e2d = np.asarray(rec["e2d"], dtype=np.float64)
            e3d = np.asarray(rec["e3d"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError) as exc:
            raise CorruptionError(f"sample {i}: {exc}") from exc
        if e2d.size != grid * grid * d2d or e3d.size != grid * grid * d3d:
            raise CorruptionError(f"sample {i}: feature sizes do not match header dims")
        mask = rle_to_mask(rec["mask_rle"], grid) if rec.get("mask_rle") is not None else None
        samples.append(FeatureSample(int(rec["class"]), _frozen(e2d.reshape(grid * grid, d2d)),
                                     _frozen(e3d.reshape(grid * grid, d3d)),
                                     _frozen(mask, bool) if mask is not None else None, bool(rec["anomalous"])))
    return header, samples
