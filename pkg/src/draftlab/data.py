"""Utterances, batching, corpus manifests and the synthetic two-domain corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import FeatureConfig, log_mel, read_wav
from .errors import ConfigurationError, ResolvablePathError
from .text import Tokenizer

N_MELS = 80


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, 80]
    transcript: list[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, T_max, 80], zero padded
    feature_lengths: np.ndarray  # [B]
    tokens: np.ndarray  # [B, L_max], zero padded
    token_lengths: np.ndarray  # [B]
    padding_mask: np.ndarray  # [B, T_max], True on real frames

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts: Sequence[Utterance]) -> Batch:
    lengths = np.array([u.n_frames for u in utts], dtype=np.int64)
    t_max = int(lengths.max())
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), t_max, dim), dtype=np.float32)
    for i, u in enumerate(utts):
        feats[i, :u.n_frames] = u.features
    tok_len = np.array([len(u.transcript) for u in utts], dtype=np.int64)
    tokens = np.zeros((len(utts), max(1, int(tok_len.max()))), dtype=np.int64)
    for i, u in enumerate(utts):
        tokens[i, :len(u.transcript)] = u.transcript
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    return Batch([u.id for u in utts], feats, lengths, tokens, tok_len, mask)


def make_batches(utts: Sequence[Utterance], batch_size: int, seed: int = 0,
                 sort_by_length: bool = False) -> list[Batch]:
    """Partition one epoch into batches; order is a pure function of ``seed``."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if not utts:
        raise ConfigurationError("cannot batch an empty corpus")
    order = np.random.default_rng(seed).permutation(len(utts))
    if sort_by_length:
        order = sorted(order, key=lambda i: utts[i].n_frames)
    return [collate([utts[i] for i in order[s:s + batch_size]])
            for s in range(0, len(order), batch_size)]


# -- manifests ----------------------------------------------------------------
def read_manifest(path: str | Path) -> list[tuple[str, str, str]]:
    """Read ``id<TAB>path<TAB>transcript`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise ResolvablePathError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 2:
            parts.append("")
        if len(parts) != 3:
            raise ConfigurationError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        uid, audio, text = parts
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        rows.append((uid, str(audio_path), text))
    return rows


def write_manifest(path: str | Path, rows: Sequence[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, audio, text in rows:
            fh.write(f"{uid}\t{audio}\t{text}\n")


def load_corpus(manifest: str | Path, tokenizer: Tokenizer | None = None,
                feature_cfg: FeatureConfig = FeatureConfig()) -> list[Utterance]:
    """Load a manifest; ``.wav`` entries go through log-mel, ``.npy`` entries are features."""
    tokenizer = tokenizer or Tokenizer()
    utts = []
    for uid, audio, text in read_manifest(manifest):
        if not Path(audio).is_file():
            raise ResolvablePathError(f"audio file not found: {audio}")
        if audio.endswith(".npy"):
            feats = np.load(audio).astype(np.float32)
        else:
            samples, rate = read_wav(audio)
            if rate != feature_cfg.sample_rate:
                raise ConfigurationError(f"{audio}: sample rate {rate} != {feature_cfg.sample_rate}")
            feats = log_mel(samples, feature_cfg)
        utts.append(Utterance(uid, feats, tokenizer.tokenize(text)))
    return utts


# -- synthetic domains ----------------------------------------------------------
@dataclass
class SyntheticDomainSpec:
    """Generative description of one synthetic domain.

    Each symbol renders as a Gaussian bump (``centers``/``bandwidths``) on a
    linear spectral tilt across the 80 bins; frames between symbols carry only
    the tilt. ``tilt`` is the domain-wide slope, ``symbol_tilts`` per-symbol
    deviations from it.
    """

    domain_id: str
    symbols: str
    symbol_probs: list[float]
    centers: list[float]
    bandwidths: list[float]
    symbol_tilts: list[float]
    tilt: float = 0.0
    amplitude: float = 3.0
    noise: float = 0.3
    min_symbols: int = 3
    max_symbols: int = 6
    min_frames: int = 10
    max_frames: int = 16
    max_gap: int = 3
    seed: int = 0

    def validate(self) -> None:
        n = len(self.symbols)
        if n == 0:
            raise ConfigurationError(f"domain {self.domain_id!r}: empty vocabulary")
        for name in ("symbol_probs", "centers", "bandwidths", "symbol_tilts"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"domain {self.domain_id!r}: {name} needs {n} entries")
        if any(p < 0 for p in self.symbol_probs) or sum(self.symbol_probs) <= 0:
            raise ConfigurationError(f"domain {self.domain_id!r}: symbol_probs must be a distribution")
        if any(b <= 0 for b in self.bandwidths):
            raise ConfigurationError(f"domain {self.domain_id!r}: bandwidths must be positive")
        if not (1 <= self.min_symbols <= self.max_symbols and 1 <= self.min_frames <= self.max_frames):
            raise ConfigurationError(f"domain {self.domain_id!r}: inconsistent length ranges")
        if self.noise < 0 or self.max_gap < 0:
            raise ConfigurationError(f"domain {self.domain_id!r}: noise and max_gap must be >= 0")

    def distribution_key(self) -> tuple:
        d = asdict(self)
        d.pop("domain_id")
        d.pop("seed")
        return tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in sorted(d.items()))

    def with_seed(self, seed: int) -> "SyntheticDomainSpec":
        d = asdict(self)
        d["seed"] = seed
        return SyntheticDomainSpec(**d)


def check_domain_shift(a: SyntheticDomainSpec, b: SyntheticDomainSpec) -> None:
    if a.domain_id != b.domain_id and a.distribution_key() == b.distribution_key():
        raise ConfigurationError(
            f"domains {a.domain_id!r} and {b.domain_id!r} share every distributional parameter")


def render_symbol(spec: SyntheticDomainSpec, k: int, n_frames: int) -> np.ndarray:
    bins = np.arange(N_MELS, dtype=np.float64)
    slope = (spec.tilt + spec.symbol_tilts[k]) * (bins - N_MELS / 2) / N_MELS
    bump = spec.amplitude * np.exp(-0.5 * ((bins - spec.centers[k]) / spec.bandwidths[k]) ** 2)
    return np.tile(slope + bump, (n_frames, 1))


def synth_generate(spec: SyntheticDomainSpec, n_utts: int, tokenizer: Tokenizer | None = None,
                   prefix: str | None = None) -> list[Utterance]:
    """Render ``n_utts`` utterances; identical spec (incl. seed) gives identical output."""
    spec.validate()
    if n_utts < 1:
        raise ConfigurationError(f"n_utts must be >= 1, got {n_utts}")
    tokenizer = tokenizer or Tokenizer()
    rng = np.random.default_rng(spec.seed)
    probs = np.asarray(spec.symbol_probs, dtype=np.float64)
    probs = probs / probs.sum()
    bins = np.arange(N_MELS, dtype=np.float64)
    background = spec.tilt * (bins - N_MELS / 2) / N_MELS
    prefix = prefix or spec.domain_id
    utts = []
    for u in range(n_utts):
        n_sym = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        seq: list[int] = []
        for _ in range(n_sym):
            p = probs.copy()
            if seq and len(spec.symbols) > 1:
                # adjacent repeats would need a blank-separated gap to be decodable
                p[seq[-1]] = 0.0
                p /= p.sum()
            seq.append(int(rng.choice(len(p), p=p)))
        pieces = [np.tile(background, (int(rng.integers(0, spec.max_gap + 1)), 1))]
        for k in seq:
            dur = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            pieces.append(render_symbol(spec, k, dur))
            pieces.append(np.tile(background, (int(rng.integers(0, spec.max_gap + 1)), 1)))
        clean = np.concatenate(pieces, axis=0)
        feats = clean + spec.noise * rng.standard_normal(clean.shape)
        text = "".join(spec.symbols[k] for k in seq)
        utts.append(Utterance(f"{prefix}-{u:05d}", feats.astype(np.float32), tokenizer.tokenize(text)))
    return utts


def write_synthetic_corpus(spec: SyntheticDomainSpec, n_utts: int, out_dir: str | Path,
                           name: str | None = None) -> Path:
    """Write features as ``.npy`` files, a manifest and a ``.spec.json`` sidecar."""
    out_dir = Path(out_dir)
    name = name or spec.domain_id
    feat_dir = out_dir / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    tok = Tokenizer()
    rows = []
    for u in synth_generate(spec, n_utts, tok, prefix=name):
        np.save(feat_dir / f"{u.id}.npy", u.features)
        rows.append((u.id, f"{name}/{u.id}.npy", tok.detokenize(u.transcript)))
    manifest = out_dir / f"{name}.tsv"
    write_manifest(manifest, rows)
    sidecar = {"n_utts": n_utts, **asdict(spec)}
    (out_dir / f"{name}.spec.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return manifest


SOURCE_NOISE, TARGET_NOISE = 1.0, 1.3


def two_domain_specs(seed: int = 0, source_noise: float = SOURCE_NOISE,
                     target_noise: float = TARGET_NOISE) -> tuple[SyntheticDomainSpec, SyntheticDomainSpec]:
    """The bundled source/target pair used by the desk-scale experiments.

    The target domain moves every spectral peak upward and flattens the tilt
    (the synthetic analogue of higher formants in child speech), widens peaks,
    adds noise and skews the symbol distribution.
    """
    symbols = "abcdefgh"
    centers = [10.0, 18.0, 26.0, 34.0, 42.0, 50.0, 58.0, 66.0]
    source = SyntheticDomainSpec(
        domain_id="source",
        symbols=symbols,
        symbol_probs=[1.0] * 8,
        centers=centers,
        bandwidths=[2.5] * 8,
        symbol_tilts=[0.0, 0.3, -0.3, 0.2, -0.2, 0.1, -0.1, 0.0],
        tilt=-2.0,
        noise=source_noise,
        seed=seed,
    )
    target = SyntheticDomainSpec(
        domain_id="target",
        symbols=symbols,
        symbol_probs=[3.0, 1.0, 2.0, 1.0, 3.0, 1.0, 2.0, 1.0],
        centers=[c * 1.1 + 1.0 for c in centers],
        bandwidths=[3.0] * 8,
        symbol_tilts=[0.0, 0.3, -0.3, 0.2, -0.2, 0.1, -0.1, 0.0],
        tilt=1.0,
        noise=target_noise,
        seed=seed + 1,
    )
    return source, target


def second_target_spec(seed: int = 0, noise: float = TARGET_NOISE) -> SyntheticDomainSpec:
    """A second target-like domain, used as corpus A in cross-transfer runs."""
    _, target = two_domain_specs(seed, target_noise=noise)
    d = asdict(target)
    d.update(domain_id="target_b", centers=[c * 1.04 for c in target.centers], tilt=0.5,
             symbol_probs=target.symbol_probs[::-1], seed=seed + 2)
    return SyntheticDomainSpec(**d)
