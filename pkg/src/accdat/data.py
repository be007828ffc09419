"""Synthetic accented corpus: generation, manifest I/O, splits, batching.

An utterance is a word sequence over a small symbol alphabet, rendered as
per-symbol prototype feature vectors held for a fixed number of frames with
additive noise. Accents are label-preserving feature transforms (channel
rotation + per-channel gains + bias, mild time stretch); accent 0 is the
identity. Annotated accent-0 utterances play the role of the supervised set
S, accents >= 1 the unannotated set U.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InvalidArgument

FEATURE_MAGIC = b"ACFT"
FEATURE_VERSION = 1


# -- domain types -------------------------------------------------------------

@dataclass
class Utterance:
    """One corpus record; features live in a sidecar .acft file."""

    id: str
    feature_path: str  # relative to the manifest directory
    frames: int
    accent_id: int
    text: str | None  # space-separated words, None when unannotated

    @property
    def annotated(self) -> bool:
        return self.text is not None


@dataclass
class AccentTransform:
    """Channel-affine + time-stretch feature transform for one accent.

    accent 0 is the exact identity (A = I, b = 0, s = 1); the matrix A stays
    well-conditioned by construction (rotation times bounded gains).
    """

    accent_id: int
    A: np.ndarray  # [F, F]
    b: np.ndarray  # [F]
    s: float  # time-stretch factor > 0
    sigma: float = 0.0  # extra post-transform noise

    @property
    def is_identity(self) -> bool:
        return self.accent_id == 0

    def apply(self, feats: np.ndarray, rng: np.random.Generator,
              min_frames: int = 1) -> np.ndarray:
        """Transform [F, T] features; output time length is
        max(round(T * s), min_frames)."""
        if self.is_identity and min_frames <= feats.shape[1]:
            return feats
        out = feats if self.is_identity else self.A @ feats + self.b[:, None]
        if self.sigma > 0:
            out = out + rng.normal(0, self.sigma, out.shape)
        t_in = out.shape[1]
        t_out = max(int(round(t_in * self.s)), min_frames)
        if t_out != t_in:
            pos = np.linspace(0.0, t_in - 1.0, t_out)
            base = np.arange(t_in, dtype=float)
            out = np.stack([np.interp(pos, base, row) for row in out])
        return out


@dataclass
class CorpusConfig:
    """Everything needed to render one domain (base-task or new-task) corpus.

    World-level fields (alphabet, feature_dim, frames_per_symbol, world_seed,
    accent geometry) are shared between the base and new configs of an
    experiment so both tasks live in the same feature space; domain-level
    fields (vocabulary, counts, noise, seed) differ.
    """

    domain: str  # "base" | "new"
    vocabulary: list[str]
    accent_counts: list[int]  # index = accent id
    frames_per_symbol: int
    feature_dim: int
    seed: int
    noise: float
    sentence_len: tuple[int, int]
    alphabet: str  # last character is the word separator
    world_seed: int
    accent_strength: float = 0.6
    stretch_range: tuple[float, float] = (0.9, 1.2)
    accent_noise: float = 0.0
    domain_shift: float = 0.0  # accent-independent channel-gain strength

    def validate(self) -> None:
        if self.domain not in ("base", "new"):
            raise ConfigError(f"domain must be base or new, got {self.domain!r}")
        if len(self.alphabet) < 2 or len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("alphabet needs >= 2 distinct symbols")
        sep = self.alphabet[-1]
        if not self.vocabulary:
            raise ConfigError("vocabulary must not be empty")
        for w in self.vocabulary:
            if not w:
                raise ConfigError("vocabulary contains an empty word")
            bad = set(w) - set(self.alphabet[:-1])
            if bad:
                raise ConfigError(f"word {w!r} uses symbols {sorted(bad)} "
                                  f"outside the alphabet (separator {sep!r} excluded)")
        if not self.accent_counts or self.accent_counts[0] <= 0:
            raise ConfigError("accent 0 must be present with a positive count")
        if any(c <= 0 for c in self.accent_counts):
            raise ConfigError("per-accent counts must be > 0")
        if self.frames_per_symbol < 1 or self.feature_dim < 1:
            raise ConfigError("frames_per_symbol and feature_dim must be >= 1")
        if self.noise < 0 or self.accent_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.domain_shift < 0:
            raise ConfigError("domain_shift must be >= 0")
        lo, hi = self.sentence_len
        if not 1 <= lo <= hi:
            raise ConfigError("sentence_len must satisfy 1 <= min <= max")
        if not 0 <= self.accent_strength <= 1:
            raise ConfigError("accent_strength must be in [0, 1]")
        slo, shi = self.stretch_range
        if not 0 < slo <= shi:
            raise ConfigError("stretch_range must satisfy 0 < min <= max")

    @property
    def n_symbols(self) -> int:
        return len(self.alphabet)

    @property
    def n_accents(self) -> int:
        return len(self.accent_counts)


# -- label encoding -----------------------------------------------------------

def encode_text(text: str, alphabet: str) -> list[int]:
    """Words -> label indices, with the separator symbol between words."""
    sep_idx = len(alphabet) - 1
    index = {ch: i for i, ch in enumerate(alphabet)}
    labels: list[int] = []
    for wi, word in enumerate(text.split()):
        if wi > 0:
            labels.append(sep_idx)
        for ch in word:
            idx = index.get(ch)
            if idx is None or idx == sep_idx:
                raise InvalidArgument(f"character {ch!r} not encodable in word {word!r}")
            labels.append(idx)
    return labels


def decode_labels(labels: list[int], alphabet: str) -> list[str]:
    """Label indices -> word list (split on the separator symbol)."""
    sep_idx = len(alphabet) - 1
    words: list[str] = []
    cur: list[str] = []
    for idx in labels:
        if not 0 <= idx < len(alphabet):
            raise InvalidArgument(f"label {idx} outside alphabet of size {len(alphabet)}")
        if idx == sep_idx:
            if cur:
                words.append("".join(cur))
                cur = []
        else:
            cur.append(alphabet[idx])
    if cur:
        words.append("".join(cur))
    return words


def default_word_list(alphabet: str, n_words: int, seed: int,
                      len_range: tuple[int, int] = (2, 5)) -> list[str]:
    """Sample a deterministic vocabulary over the non-separator symbols."""
    rng = np.random.default_rng([seed, 0xC0])
    syms = alphabet[:-1]
    words: set[str] = set()
    while len(words) < n_words:
        n = int(rng.integers(len_range[0], len_range[1] + 1))
        words.add("".join(syms[int(rng.integers(0, len(syms)))] for _ in range(n)))
    return sorted(words)


# -- world geometry -----------------------------------------------------------

def symbol_prototypes(config: CorpusConfig) -> np.ndarray:
    """Fixed per-symbol feature vectors, drawn once per world seed."""
    rng = np.random.default_rng([config.world_seed, 0x01])
    return rng.normal(0.0, 1.0, (config.n_symbols, config.feature_dim))


def domain_gains(config: CorpusConfig) -> np.ndarray:
    """Accent-independent per-channel gains modelling the task domain shift.

    Drawn from the world seed and the domain tag, so both tasks share the
    symbol space but the new-task recordings have systematically different
    channel responses; strength 0 is an exact identity.
    """
    if config.domain_shift == 0:
        return np.ones(config.feature_dim)
    rng = np.random.default_rng([config.world_seed, 0x03,
                                 0 if config.domain == "base" else 1])
    return np.exp(rng.uniform(-config.domain_shift, config.domain_shift,
                              config.feature_dim))


def accent_transforms(config: CorpusConfig) -> list[AccentTransform]:
    """One transform per accent; accent 0 is the identity.

    A = Cayley rotation of a strength-scaled skew matrix, times per-channel
    gains exp(strength * u), u ~ U(-0.6, 0.6); the gain spread bounds the
    condition number below e^(1.2 * strength) <= 10.
    """
    F = config.feature_dim
    out = [AccentTransform(0, np.eye(F), np.zeros(F), 1.0, 0.0)]
    w = config.accent_strength
    slo, shi = config.stretch_range
    for a in range(1, config.n_accents):
        rng = np.random.default_rng([config.world_seed, 0x02, a])
        R = rng.normal(0.0, 1.0, (F, F)) / math.sqrt(F)
        skew = w * (R - R.T) / 2.0
        Q = np.linalg.solve(np.eye(F) + skew, np.eye(F) - skew)
        gains = np.exp(w * rng.uniform(-0.6, 0.6, F))
        A = Q @ np.diag(gains)
        b = w * rng.normal(0.0, 0.8, F)
        s = float(rng.uniform(slo, shi))
        out.append(AccentTransform(a, A, b, s, config.accent_noise))
    return out


# -- rendering ----------------------------------------------------------------

def _utterance_rng(seed: int, uid: str) -> np.random.Generator:
    """Stable per-utterance generator so generation order never matters."""
    digest = hashlib.sha256(f"{seed}:{uid}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def render_utterance(config: CorpusConfig, prototypes: np.ndarray,
                     transform: AccentTransform, uid: str,
                     gains: np.ndarray | None = None) -> tuple[np.ndarray, str]:
    """Render one utterance; returns ([F, T] float64 features, text)."""
    rng = _utterance_rng(config.seed, uid)
    lo, hi = config.sentence_len
    n_words = int(rng.integers(lo, hi + 1))
    words = [config.vocabulary[int(rng.integers(0, len(config.vocabulary)))]
             for _ in range(n_words)]
    text = " ".join(words)
    labels = encode_text(text, config.alphabet)
    sep_idx = config.n_symbols - 1
    seq = [sep_idx] + labels + [sep_idx]  # lead-in / lead-out silence
    d = config.frames_per_symbol
    clean = np.repeat(prototypes[seq].T, d, axis=1)
    if gains is None:
        gains = domain_gains(config)
    if not np.all(gains == 1.0):
        clean = gains[:, None] * clean
    noisy = clean if config.noise == 0 else clean + rng.normal(0, config.noise, clean.shape)
    # keep enough frames that the stride-2 encoder output admits a CTC
    # alignment of the blank-extended target: ceil(T/2) >= 2L+1
    min_frames = 4 * len(labels) + 2
    feats = transform.apply(noisy, rng, min_frames=min_frames)
    return feats, text


# -- feature file format --------------------------------------------------------

def write_features(path: Path, feats: np.ndarray) -> None:
    """Write [F, T] features as magic 'ACFT', u32 version/channels/frames,
    then frame-major float32 little-endian payload."""
    F, T = feats.shape
    payload = np.ascontiguousarray(feats.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, F, T))
        fh.write(payload.tobytes())


def read_feature_header(path: Path) -> tuple[int, int]:
    """Return (channels, frames) after validating magic and version."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not an ACFT feature file")
    version, F, T = struct.unpack("<III", head[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    return F, T


def read_features(path: Path) -> np.ndarray:
    """Load a feature file back as [F, T] float32."""
    F, T = read_feature_header(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    expect = 16 + 4 * F * T
    if len(raw) != expect:
        raise DataError(f"{path}: expected {expect} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, F)
    return np.ascontiguousarray(payload.T)


# -- manifest I/O ---------------------------------------------------------------

def write_manifest(path: Path, utts: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            rec = {"id": u.id, "features": u.feature_path, "text": u.text,
                   "accent": u.accent_id, "frames": u.frames}
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path: Path, check_features: bool = True) -> list[Utterance]:
    """Parse a JSON-lines manifest, validating each record.

    With check_features, every referenced feature file's header must match
    the declared channel/frame counts.
    """
    path = Path(path)
    root = path.parent
    utts: list[Utterance] = []
    expected_f: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e})") from e
            try:
                utt = Utterance(
                    id=str(rec["id"]),
                    feature_path=str(rec["features"]),
                    frames=int(rec["frames"]),
                    accent_id=int(rec["accent"]),
                    text=rec["text"] if rec["text"] is None else str(rec["text"]),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad record ({e})") from e
            if utt.accent_id < 0:
                raise DataError(f"{path}:{lineno}: negative accent id")
            if check_features:
                F, T = read_feature_header(root / utt.feature_path)
                if T != utt.frames:
                    raise DataError(
                        f"{path}:{lineno}: manifest says {utt.frames} frames, "
                        f"feature file has {T}")
                if expected_f is None:
                    expected_f = F
                elif F != expected_f:
                    raise DataError(
                        f"{path}:{lineno}: feature dim {F} != corpus dim {expected_f}")
            utts.append(utt)
    return utts


def load_utterance_features(root: Path, utt: Utterance) -> np.ndarray:
    return read_features(Path(root) / utt.feature_path)


# -- corpus generation -----------------------------------------------------------

def generate_corpus(config: CorpusConfig, out_dir: Path) -> list[Utterance]:
    """Render every utterance of one domain corpus under out_dir.

    Layout: out_dir/manifest.jsonl plus out_dir/features/<id>.acft. Output
    bytes are a pure function of the config: every utterance derives its own
    generator from (seed, id).
    """
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    prototypes = symbol_prototypes(config)
    transforms = accent_transforms(config)
    gains = domain_gains(config)
    utts: list[Utterance] = []
    for accent_id, count in enumerate(config.accent_counts):
        for i in range(count):
            uid = f"{config.domain}-a{accent_id}-{i:05d}"
            feats, text = render_utterance(config, prototypes,
                                           transforms[accent_id], uid, gains)
            rel = f"features/{uid}.acft"
            write_features(out_dir / rel, feats)
            utts.append(Utterance(uid, rel, feats.shape[1], accent_id, text))
    write_manifest(out_dir / "manifest.jsonl", utts)
    return utts


def split_corpus(utts: list[Utterance], ratios: tuple[float, float, float],
                 seed: int) -> dict[str, list[Utterance]]:
    """Per-accent stratified train/test/validation partition.

    ratios are (train, test, validation); floor rounding assigns remainders
    to train. Accents with fewer than 3 utterances go entirely to train with
    a warning.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"split ratios must sum to 1, got {ratios}")
    r_train, r_test, r_val = ratios
    if min(ratios) < 0:
        raise InvalidArgument("split ratios must be non-negative")
    rng = np.random.default_rng([seed, 0x5B])
    by_accent: dict[int, list[Utterance]] = {}
    for u in utts:
        by_accent.setdefault(u.accent_id, []).append(u)
    splits: dict[str, list[Utterance]] = {"train": [], "test": [], "validation": []}
    for accent_id in sorted(by_accent):
        group = sorted(by_accent[accent_id], key=lambda u: u.id)
        if len(group) < 3:
            warnings.warn(f"accent {accent_id} has only {len(group)} utterances; "
                          "placing all in train", stacklevel=2)
            splits["train"].extend(group)
            continue
        order = rng.permutation(len(group))
        n = len(group)
        n_test = int(n * r_test)
        n_val = int(n * r_val)
        shuffled = [group[i] for i in order]
        splits["test"].extend(shuffled[:n_test])
        splits["validation"].extend(shuffled[n_test:n_test + n_val])
        splits["train"].extend(shuffled[n_test + n_val:])
    for part in splits.values():
        part.sort(key=lambda u: u.id)
    return splits


# -- training-time views -----------------------------------------------------------

def as_training_sets(utts: list[Utterance]) -> tuple[list[Utterance], list[Utterance]]:
    """Partition into S (annotated accent 0) and U (accents >= 1, text withheld).

    The returned U records carry text=None so no loss computation can see
    their transcriptions, mirroring the unannotated set's contract.
    """
    S: list[Utterance] = []
    U: list[Utterance] = []
    for u in utts:
        if u.accent_id == 0:
            if u.text is None:
                raise DataError(f"utterance {u.id}: accent 0 requires a transcription")
            S.append(u)
        else:
            U.append(replace(u, text=None))
    return S, U


def make_batches(S: list[Utterance], U: list[Utterance], batch_size: int,
                 rho: float, seed: int, epoch: int = 0) -> list[list[Utterance]]:
    """Mixed annotated/unannotated batches for one epoch.

    Each batch draws round(rho * batch_size) samples from S and the rest
    from U; the epoch covers the larger stream once while the smaller one
    cycles. Shuffling is a pure function of (seed, epoch).
    """
    if not 0 <= rho <= 1:
        raise InvalidArgument(f"rho must be in [0, 1], got {rho}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n_s = round(rho * batch_size)
    n_u = batch_size - n_s
    if batch_size < 2 and 0 < rho < 1:
        raise ConfigError("mixed batches need batch_size >= 2")
    if n_s > 0 and not S:
        raise ConfigError("batch quota draws from S but S is empty")
    if n_u > 0 and not U:
        raise ConfigError("batch quota draws from U but U is empty")
    rng = np.random.default_rng([seed, 0xBA, epoch])
    s_order = [S[i] for i in rng.permutation(len(S))] if S else []
    u_order = [U[i] for i in rng.permutation(len(U))] if U else []
    n_batches_s = math.ceil(len(s_order) / n_s) if n_s else 0
    n_batches_u = math.ceil(len(u_order) / n_u) if n_u else 0
    n_batches = max(n_batches_s, n_batches_u)
    batches: list[list[Utterance]] = []
    for k in range(n_batches):
        batch: list[Utterance] = []
        if n_s:
            if n_batches_s == n_batches:  # larger (or equal) stream: consume slices
                batch.extend(s_order[k * n_s:(k + 1) * n_s])
            else:  # smaller stream cycles
                batch.extend(s_order[(k * n_s + j) % len(s_order)] for j in range(n_s))
        if n_u:
            if n_batches_u == n_batches and n_batches_u >= n_batches_s:
                batch.extend(u_order[k * n_u:(k + 1) * n_u])
            else:
                batch.extend(u_order[(k * n_u + j) % len(u_order)] for j in range(n_u))
        batches.append(batch)
    return batches
