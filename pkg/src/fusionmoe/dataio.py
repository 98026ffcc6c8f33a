"""MIMB embedding-bundle file format and the synthetic benchmark generator.

MIMB is a little-endian binary interchange format:

    header:  magic "MIMB" | u32 version | u32 n_samples
             | u32 n_text_tokens | u32 text_dim
             | u32 n_image_tokens | u32 image_dim | u32 clip_dim
    record:  u8 label | u8 interaction_truth
             | f32 text tokens (row-major) | f32 image tokens
             | f32 clip_text | f32 clip_image
             [version 2: | u16 n_text_valid | u16 n_image_valid]

The reader validates every structural invariant and rejects NaN/Inf payloads
and zero alignment vectors; each failure mode carries a distinct error code.

The generator manufactures labeled samples across the four modality
interaction regimes (DM, DA, AM, AA).  Tokens are drawn around per-class
centers; whether a modality's tokens sit at the true or the flipped center
is controlled per regime so that agreement regimes get concordant cue flips
and disagreement regimes discordant ones.  Alignment vectors are built as
exact-cosine pairs at rho_hi (aligned regimes) or rho_lo (misaligned).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, fields

import numpy as np

MAGIC = b"MIMB"
_HEADER_FMT = "<4s7I"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)
SUPPORTED_VERSIONS = (1, 2)
UNKNOWN_TRUTH = 255

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")

# jitter applied to the anchor direction before normalizing clip_text; keeps
# alignment vectors clustered by cue without being literal constants
CLIP_JITTER = 0.15

# class centers and clip anchors define the task itself, so they are drawn
# from a fixed stream (not the sample seed): bundles generated with different
# seeds but equal dims describe the same task and can serve as train/test
# counterparts
TASK_DIRECTION_SEED = 7021943


class FormatErrorCode(enum.Enum):
    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    BAD_DIMS = "bad_dims"
    TRUNCATED = "truncated"
    NAN_PAYLOAD = "nan_payload"
    BAD_LABEL = "bad_label"
    ZERO_CLIP = "zero_clip"


class FormatError(ValueError):
    """A bundle violates the MIMB contract; `.code` identifies how."""

    def __init__(self, code: FormatErrorCode, msg: str):
        self.code = code
        super().__init__(f"[{code.value}] {msg}")


class InfeasibleRegimeError(ValueError):
    """Requested regime counts cannot be produced at the given predictabilities."""


@dataclass(frozen=True)
class BundleHeader:
    n_samples: int
    n_text_tokens: int
    text_dim: int
    n_image_tokens: int
    image_dim: int
    clip_dim: int
    version: int = 1

    def __post_init__(self):
        if self.version not in SUPPORTED_VERSIONS:
            raise FormatError(FormatErrorCode.BAD_VERSION,
                              f"unsupported version {self.version}")
        dims = (self.n_text_tokens, self.text_dim, self.n_image_tokens,
                self.image_dim, self.clip_dim)
        if any(d < 1 for d in dims):
            raise FormatError(FormatErrorCode.BAD_DIMS,
                              f"all dims must be >= 1, got {dims}")
        if self.n_samples < 0:
            raise FormatError(FormatErrorCode.BAD_DIMS,
                              f"negative sample count {self.n_samples}")

    @property
    def floats_per_record(self) -> int:
        return (self.n_text_tokens * self.text_dim
                + self.n_image_tokens * self.image_dim
                + 2 * self.clip_dim)

    @property
    def record_size(self) -> int:
        size = 2 + 4 * self.floats_per_record
        if self.version >= 2:
            size += 4  # two u16 valid-token counts
        return size


@dataclass
class EmbeddingRecord:
    y: int
    interaction_truth: int
    text: np.ndarray        # (n_text_tokens, text_dim) float32
    image: np.ndarray       # (n_image_tokens, image_dim) float32
    clip_text: np.ndarray   # (clip_dim,) float32
    clip_image: np.ndarray  # (clip_dim,) float32
    n_text_valid: int | None = None
    n_image_valid: int | None = None


def _validate_record(header: BundleHeader, rec: EmbeddingRecord, idx: int):
    if rec.y not in (0, 1):
        raise FormatError(FormatErrorCode.BAD_LABEL,
                          f"record {idx}: label {rec.y} not in {{0, 1}}")
    if rec.interaction_truth not in (0, 1, 2, 3, UNKNOWN_TRUTH):
        raise FormatError(FormatErrorCode.BAD_LABEL,
                          f"record {idx}: interaction_truth {rec.interaction_truth}")
    shapes = {
        "text": (rec.text, (header.n_text_tokens, header.text_dim)),
        "image": (rec.image, (header.n_image_tokens, header.image_dim)),
        "clip_text": (rec.clip_text, (header.clip_dim,)),
        "clip_image": (rec.clip_image, (header.clip_dim,)),
    }
    for name, (arr, want) in shapes.items():
        if arr.shape != want:
            raise FormatError(FormatErrorCode.BAD_DIMS,
                              f"record {idx}: {name} shape {arr.shape} != {want}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(FormatErrorCode.NAN_PAYLOAD,
                              f"record {idx}: non-finite values in {name}")
    if not np.any(rec.clip_text) or not np.any(rec.clip_image):
        raise FormatError(FormatErrorCode.ZERO_CLIP,
                          f"record {idx}: zero alignment vector")
    if header.version >= 2:
        for name, count, limit in (("text", rec.n_text_valid, header.n_text_tokens),
                                   ("image", rec.n_image_valid, header.n_image_tokens)):
            if count is None or not 0 <= count <= limit:
                raise FormatError(FormatErrorCode.BAD_LABEL,
                                  f"record {idx}: bad valid-{name}-token count {count}")


def write_bundle(path, header: BundleHeader, records: list[EmbeddingRecord]):
    """Write a validated bundle; byte-identical for identical inputs."""
    if len(records) != header.n_samples:
        raise FormatError(FormatErrorCode.BAD_DIMS,
                          f"{len(records)} records but header says {header.n_samples}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_FMT, MAGIC, header.version, header.n_samples,
                             header.n_text_tokens, header.text_dim,
                             header.n_image_tokens, header.image_dim,
                             header.clip_dim))
        for idx, rec in enumerate(records):
            _validate_record(header, rec, idx)
            fh.write(struct.pack("<BB", rec.y, rec.interaction_truth))
            for arr in (rec.text, rec.image, rec.clip_text, rec.clip_image):
                fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
            if header.version >= 2:
                fh.write(struct.pack("<HH", rec.n_text_valid, rec.n_image_valid))


def read_bundle(path) -> tuple[BundleHeader, list[EmbeddingRecord]]:
    """Read and fully validate a bundle; raises FormatError on any defect."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(FormatErrorCode.TRUNCATED,
                          f"file shorter than the {HEADER_SIZE}-byte header")
    magic, version, n_samples, n_t, d_t, n_i, d_i, d_c = struct.unpack_from(
        _HEADER_FMT, raw)
    if magic != MAGIC:
        raise FormatError(FormatErrorCode.BAD_MAGIC, f"magic {magic!r} != {MAGIC!r}")
    if version not in SUPPORTED_VERSIONS:
        raise FormatError(FormatErrorCode.BAD_VERSION, f"unsupported version {version}")
    header = BundleHeader(n_samples=n_samples, n_text_tokens=n_t, text_dim=d_t,
                          n_image_tokens=n_i, image_dim=d_i, clip_dim=d_c,
                          version=version)
    body = len(raw) - HEADER_SIZE
    expected = header.record_size * n_samples
    if body != expected:
        broken = body // header.record_size if body < expected else n_samples
        raise FormatError(
            FormatErrorCode.TRUNCATED,
            f"payload is {body} bytes, expected {expected}; "
            f"file breaks at record {min(broken, n_samples - 1) if n_samples else 0}")

    records = []
    offset = HEADER_SIZE
    for idx in range(n_samples):
        y, truth = struct.unpack_from("<BB", raw, offset)
        pos = offset + 2
        blocks = []
        for count in (n_t * d_t, n_i * d_i, d_c, d_c):
            blocks.append(np.frombuffer(raw, dtype=_F32, count=count, offset=pos).copy())
            pos += 4 * count
        rec = EmbeddingRecord(
            y=y, interaction_truth=truth,
            text=blocks[0].reshape(n_t, d_t),
            image=blocks[1].reshape(n_i, d_i),
            clip_text=blocks[2], clip_image=blocks[3])
        if version >= 2:
            rec.n_text_valid, rec.n_image_valid = struct.unpack_from("<HH", raw, pos)
            pos += 4
        _validate_record(header, rec, idx)
        records.append(rec)
        offset += header.record_size
    return header, records


def stack_records(records: list[EmbeddingRecord]) -> dict[str, np.ndarray]:
    """Stack a record list into contiguous arrays for batched training."""
    return {
        "text": np.stack([r.text for r in records]),
        "image": np.stack([r.image for r in records]),
        "clip_text": np.stack([r.clip_text for r in records]),
        "clip_image": np.stack([r.clip_image for r in records]),
        "y": np.array([r.y for r in records], dtype=np.int64),
        "truth": np.array([r.interaction_truth for r in records], dtype=np.int64),
    }


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Controls for the four-regime synthetic benchmark.

    Regime counts are indexed DM, DA, AM, AA.  p_text / p_image set the
    marginal cue predictability per modality; within disagreement regimes the
    flipped modality is keyed to the alignment bit (DM: text mostly right,
    DA: image mostly right) so that regime-aware fusion carries signal beyond
    either single modality.
    """

    n_dm: int = 1000
    n_da: int = 1000
    n_am: int = 1000
    n_aa: int = 1000
    p_text: float = 0.85
    p_image: float = 0.75
    rho_hi: float = 0.8
    rho_lo: float = 0.0
    separation: float = 2.0
    noise: float = 0.8
    seed: int = 0
    n_text_tokens: int = 8
    text_dim: int = 32
    n_image_tokens: int = 8
    image_dim: int = 32
    clip_dim: int = 16

    def __post_init__(self):
        counts = (self.n_dm, self.n_da, self.n_am, self.n_aa)
        if any(c < 0 for c in counts) or sum(counts) < 1:
            raise InfeasibleRegimeError(f"bad regime counts {counts}")
        for name, p in (("p_text", self.p_text), ("p_image", self.p_image)):
            if not 0.5 <= p <= 1.0:
                raise InfeasibleRegimeError(f"{name} must be in [0.5, 1], got {p}")
        if not -1.0 <= self.rho_lo < self.rho_hi <= 1.0:
            raise InfeasibleRegimeError(
                f"need -1 <= rho_lo < rho_hi <= 1, got ({self.rho_lo}, {self.rho_hi})")
        if (self.n_dm or self.n_da) and self.p_text == 1.0 and self.p_image == 1.0:
            raise InfeasibleRegimeError(
                "disagreement regimes are impossible when both modalities are "
                "perfectly predictable")
        if self.separation <= 0 or self.noise < 0:
            raise InfeasibleRegimeError("separation must be > 0 and noise >= 0")
        dims = (self.n_text_tokens, self.text_dim, self.n_image_tokens,
                self.image_dim, self.clip_dim)
        if any(d < 1 for d in dims):
            raise InfeasibleRegimeError(f"dims must be >= 1, got {dims}")
        if self.clip_dim < 2:
            raise InfeasibleRegimeError("clip_dim must be >= 2 for cosine pairs")

    def header(self, version: int = 1) -> BundleHeader:
        return BundleHeader(
            n_samples=self.n_dm + self.n_da + self.n_am + self.n_aa,
            n_text_tokens=self.n_text_tokens, text_dim=self.text_dim,
            n_image_tokens=self.n_image_tokens, image_dim=self.image_dim,
            clip_dim=self.clip_dim, version=version)

    def with_counts(self, n_dm: int, n_da: int, n_am: int, n_aa: int,
                    seed: int | None = None) -> "SynthConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(n_dm=n_dm, n_da=n_da, n_am=n_am, n_aa=n_aa)
        if seed is not None:
            kw["seed"] = seed
        return SynthConfig(**kw)


def natural_regime_weights(p_text: float, p_image: float) -> np.ndarray:
    """Regime fractions (DM, DA, AM, AA) under which the generator's flip
    rules reproduce the marginal cue predictabilities exactly.

    Solves the two marginal constraints for the disagreement split; requires
    p_text + p_image > 1 so that a solution exists.
    """
    q_t, q_i = 1.0 - p_text, 1.0 - p_image
    w_agr = p_text * p_image + q_t * q_i
    denom = p_image - q_t
    if denom <= 0:
        raise InfeasibleRegimeError(
            "natural regime weights need p_text + p_image > 1")
    w_da = q_t * p_text * (p_image - q_i) / denom
    w_dm = (1.0 - w_agr) - w_da
    if w_dm < 0 or w_da < 0:
        raise InfeasibleRegimeError(
            f"no feasible disagreement split for p=({p_text}, {p_image})")
    return np.array([w_dm, w_da, w_agr / 2.0, w_agr / 2.0])


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _orthonormal_to(u_hat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        w = rng.standard_normal(u_hat.shape[0])
        w = w - (w @ u_hat) * u_hat
        n = np.linalg.norm(w)
        if n > 1e-8:
            return w / n


def _clip_pair(anchor: np.ndarray, rho: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exact-cosine float32 pair: jittered unit anchor and its rho-partner.

    The partner is constructed against the float32-rounded anchor, so the
    cosine recomputed from the stored bytes matches rho to ~1e-7.
    """
    base = _unit(anchor + CLIP_JITTER * rng.standard_normal(anchor.shape[0]))
    clip_t = base.astype(_F32)
    u_hat = _unit(clip_t.astype(np.float64))
    w_hat = _orthonormal_to(u_hat, rng)
    clip_i = (rho * u_hat + np.sqrt(1.0 - rho * rho) * w_hat).astype(_F32)
    return clip_t, clip_i


def task_directions(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray,
                                               tuple[np.ndarray, np.ndarray]]:
    """Per-class token directions and cue-keyed clip anchors for these dims."""
    rng = np.random.default_rng(TASK_DIRECTION_SEED)
    u_text = _unit(rng.standard_normal(cfg.text_dim))
    u_image = _unit(rng.standard_normal(cfg.image_dim))
    anchor0 = _unit(rng.standard_normal(cfg.clip_dim))
    anchor1 = _orthonormal_to(anchor0, rng)
    return u_text, u_image, (anchor0, anchor1)


def generate_synthetic(cfg: SynthConfig) -> list[EmbeddingRecord]:
    """Deterministic four-regime sample synthesis; same seed, same bytes."""
    rng = np.random.default_rng(cfg.seed)
    u_text, u_image, anchors = task_directions(cfg)

    q_t, q_i = 1.0 - cfg.p_text, 1.0 - cfg.p_image
    share = q_t * q_i / (q_t * q_i + cfg.p_text * cfg.p_image)

    regimes = np.repeat(np.arange(4), [cfg.n_dm, cfg.n_da, cfg.n_am, cfg.n_aa])
    rng.shuffle(regimes)

    half_sep = 0.5 * cfg.separation
    records = []
    for regime in regimes:
        y = int(rng.integers(0, 2))
        if regime >= 2:  # agreement: one shared flip
            f_t = f_i = int(rng.random() < share)
        elif regime == 0:  # DM: text right with prob p_text
            f_t = int(rng.random() < q_t)
            f_i = 1 - f_t
        else:  # DA: image right with prob p_image
            f_t = int(rng.random() < cfg.p_image)
            f_i = 1 - f_t
        c_t, c_i = y ^ f_t, y ^ f_i

        text = ((2 * c_t - 1) * half_sep * u_text
                + cfg.noise * rng.standard_normal((cfg.n_text_tokens, cfg.text_dim)))
        image = ((2 * c_i - 1) * half_sep * u_image
                 + cfg.noise * rng.standard_normal((cfg.n_image_tokens, cfg.image_dim)))
        rho = cfg.rho_hi if regime % 2 == 1 else cfg.rho_lo
        clip_t, clip_i = _clip_pair(anchors[c_t], rho, rng)
        records.append(EmbeddingRecord(
            y=y, interaction_truth=int(regime),
            text=text.astype(_F32), image=image.astype(_F32),
            clip_text=clip_t, clip_image=clip_i))
    return records


def generate_bundle(path, cfg: SynthConfig) -> BundleHeader:
    """Generate and write a bundle in one call; returns the header."""
    header = cfg.header()
    write_bundle(path, header, generate_synthetic(cfg))
    return header
