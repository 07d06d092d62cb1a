"""Paired-data construction: synthetic burst corpus, H2L-generated pairs, manifests, patch batches."""
from __future__ import annotations

import dataclasses
import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, FormatError, NotFound, ValidationError
from .imaging import Image, NoiseSpec, load_image, save_image

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

NOISY_HR = "NOISY_HR"
GENERATED_LR = "GENERATED_LR"
UNPAIRED_NOISY = "UNPAIRED_NOISY"
ROLES = (NOISY_HR, GENERATED_LR, UNPAIRED_NOISY)
SPLITS = ("train", "val", "test")


def iteration_seed(seed: int, *keys: int) -> int:
    """Stable sub-seed for (seed, iteration, worker, ...)."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class ManifestEntry:
    hr_clean_path: str | None
    partner_path: str
    partner_role: str
    scene_id: str
    split: str = "train"


@dataclass
class PairManifest:
    entries: list[ManifestEntry]
    scale_factor: int = 4
    # relative entry paths are resolved against root
    root: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def select(self, role: str, split: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if e.partner_role == role and (split is None or e.split == split)]

    def paths(self) -> list[str]:
        out = []
        for e in self.entries:
            if e.hr_clean_path is not None:
                out.append(e.hr_clean_path)
            out.append(e.partner_path)
        return out

    def missing_paths(self) -> list[str]:
        """Validation report: every listed path that does not exist on disk."""
        return [p for p in self.paths() if not self.resolve(p).is_file()]

    def check(self, check_files: bool = True):
        """Raise ValidationError listing every violated manifest invariant."""
        problems = []
        for e in self.entries:
            if e.partner_role not in ROLES:
                problems.append(f"unknown role {e.partner_role} for {e.partner_path}")
            if e.split not in SPLITS:
                problems.append(f"unknown split {e.split} for {e.partner_path}")
            if e.partner_role != UNPAIRED_NOISY and e.hr_clean_path is None:
                problems.append(f"{e.partner_path} has no clean partner")
        paths = self.paths()
        dupes = sorted({p for p in paths if paths.count(p) > 1})
        problems += [f"listed twice: {p}" for p in dupes]
        scene_split: dict[str, set] = {}
        for e in self.entries:
            scene_split.setdefault(e.scene_id, set()).add(e.split)
        problems += [f"scene {s} straddles splits {sorted(v)}"
                     for s, v in scene_split.items() if len(v) > 1]
        if check_files:
            missing = self.missing_paths()
            if missing:
                raise ValidationError(f"{len(missing)} missing file(s): {', '.join(missing)}", missing)
            for e in self.entries:
                if e.hr_clean_path is None:
                    continue
                hh, hw = _load_array(str(self.resolve(e.hr_clean_path))).shape[:2]
                ph, pw = _load_array(str(self.resolve(e.partner_path))).shape[:2]
                if e.partner_role == NOISY_HR and (ph, pw) != (hh, hw):
                    problems.append(f"{e.partner_path}: noisy HR {ph}x{pw} != clean {hh}x{hw}")
                s = self.scale_factor
                if e.partner_role == GENERATED_LR and (ph * s, pw * s) != (hh, hw):
                    problems.append(f"{e.partner_path}: LR {ph}x{pw} x{s} != HR {hh}x{hw}")
        if problems:
            raise ValidationError("; ".join(problems), problems)
        return self


def save_manifest(manifest: PairManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = Path(manifest.root).resolve()
    try:
        root_str = str(root.relative_to(path.parent.resolve())) or "."
    except ValueError:
        root_str = str(root)
    doc = {
        "version": MANIFEST_VERSION,
        "scale_factor": manifest.scale_factor,
        "root": root_str,
        "entries": [dataclasses.asdict(e) for e in manifest.entries],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_manifest(path) -> PairManifest:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such manifest: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {path} is not valid JSON: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')!r} in {path}")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = path.parent.resolve() / root
    entries = [ManifestEntry(**e) for e in doc["entries"]]
    return PairManifest(entries, int(doc["scale_factor"]), str(root.resolve()))


@functools.lru_cache(maxsize=256)
def _load_array(path: str) -> np.ndarray:
    return load_image(path).data


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class CorpusConfig:
    n_scenes: int = 5
    n_unpaired: int = 2
    image_size: int = 128
    burst_size: int = 20
    # signal-dependent noise: sigma(x) = sigma_read + sigma_shot * x
    sigma_read: float = 0.02
    sigma_shot: float = 0.06
    split: tuple[float, float, float] = (1.0, 0.0, 0.0)
    scale_factor: int = 4
    bit_depth: int = 16

    def __post_init__(self):
        if self.image_size % self.scale_factor:
            raise ValueError("image_size must be a multiple of scale_factor")
        if self.burst_size < 2:
            raise ValueError("burst_size must be >= 2")
        if self.n_scenes < 1 or self.n_unpaired < 0:
            raise ValueError("need at least one paired scene")
        self.split = tuple(float(x) for x in self.split)


def procedural_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth colour field with hard-edged rectangles and discs on top."""
    img = np.empty((size, size, 3))
    for ch in range(3):
        field_ = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(2, 10), mode="wrap")
        field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-12)
        lo = rng.uniform(0.05, 0.4)
        img[:, :, ch] = lo + field_ * rng.uniform(0.3, 0.95 - lo)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(0.0, 1.0, 3)
        if rng.random() < 0.5:
            r0, c0 = rng.integers(0, size, 2)
            h, w = rng.integers(size // 16 + 1, size // 3 + 2, 2)
            img[r0:r0 + h, c0:c0 + w] = color
        else:
            cy, cx = rng.uniform(0, size, 2)
            rad = rng.uniform(size / 20, size / 5)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = color
    return np.clip(img, 0.0, 1.0)


def noisy_frame(clean: np.ndarray, rng: np.random.Generator, sigma_read: float, sigma_shot: float) -> np.ndarray:
    """One unclipped signal-dependent Gaussian realization."""
    return clean + rng.standard_normal(clean.shape) * (sigma_read + sigma_shot * clean)


def burst_mean(clean: np.ndarray, burst_size: int, rng: np.random.Generator,
               sigma_read: float, sigma_shot: float) -> np.ndarray:
    """Average of a burst of realizations; the multi-frame fusion stand-in."""
    acc = np.zeros_like(clean)
    for _ in range(burst_size):
        acc += noisy_frame(clean, rng, sigma_read, sigma_shot)
    return acc / burst_size


def _assign_splits(n: int, fractions, rng: np.random.Generator) -> list[str]:
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    counts = np.floor(fr * n).astype(int)
    counts[0] += n - counts.sum()
    labels = [s for s, k in zip(SPLITS, counts) for _ in range(k)]
    return [labels[i] for i in rng.permutation(n)]


def synth_burst_corpus(config: CorpusConfig, seed: int, out_dir) -> PairManifest:
    """Write the burst-noise corpus under ``out_dir`` and return its manifest.

    Paired scenes give (burst mean -> hr_clean, held-out frame -> hr_noisy);
    a disjoint set of scenes contributes single unpaired noisy images.
    """
    out_dir = Path(out_dir)
    split_rng = np.random.default_rng([seed, 0xC0])
    splits = _assign_splits(config.n_scenes, config.split, split_rng)
    entries = []
    for i in range(config.n_scenes):
        rng = np.random.default_rng([seed, 1, i])
        clean = procedural_scene(config.image_size, rng)
        held_out = noisy_frame(clean, rng, config.sigma_read, config.sigma_shot)
        fused = burst_mean(clean, config.burst_size - 1, rng, config.sigma_read, config.sigma_shot)
        scene = f"scene_{i:04d}"
        hc = f"{scene}/hr_clean_0.png"
        hn = f"{scene}/hr_noisy_0.png"
        save_image(Image(np.clip(fused, 0, 1)), out_dir / hc, config.bit_depth)
        save_image(Image(np.clip(held_out, 0, 1)), out_dir / hn, config.bit_depth)
        entries.append(ManifestEntry(hc, hn, NOISY_HR, scene, splits[i]))
    for j in range(config.n_unpaired):
        rng = np.random.default_rng([seed, 2, j])
        clean = procedural_scene(config.image_size, rng)
        scene = f"unpaired_{j:04d}"
        p = f"{scene}/unpaired_noisy_0.png"
        save_image(Image(np.clip(noisy_frame(clean, rng, config.sigma_read, config.sigma_shot), 0, 1)),
                   out_dir / p, config.bit_depth)
        entries.append(ManifestEntry(None, p, UNPAIRED_NOISY, scene, "train"))
    return PairManifest(entries, config.scale_factor, str(out_dir.resolve()))


def synthesize_gmsr(h2l, hr_corpus, noise_spec: NoiseSpec, seed: int, out_dir,
                    names: list[str] | None = None) -> PairManifest:
    """Generate a realistic LR partner for every clean HR image with the degradation generator.

    ``hr_corpus`` holds Images or PNG paths. Images whose size is not a
    multiple of the scale factor are skipped with a warning.
    """
    from .networks import forward_h2l

    out_dir = Path(out_dir)
    s = h2l.spec.scale_factor
    entries = []
    for i, item in enumerate(hr_corpus):
        img = item if isinstance(item, Image) else load_image(item)
        name = names[i] if names else f"gmsr_{i:05d}"
        if img.height % s or img.width % s:
            log.warning("skipping %s: %dx%d not divisible by %d", name, img.height, img.width, s)
            continue
        rng = np.random.default_rng([seed, i])
        noise = rng.normal(noise_spec.mean, noise_spec.std_dev, (img.height, img.width, 1))
        with torch.no_grad():
            lr = forward_h2l(h2l, img, noise)
        hc = f"{name}/hr_clean_0.png"
        lp = f"{name}/lr_generated_0.png"
        save_image(img, out_dir / hc, 16)
        save_image(lr, out_dir / lp, 16)
        entries.append(ManifestEntry(hc, lp, GENERATED_LR, name, "train"))
    return PairManifest(entries, s, str(out_dir.resolve()))


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    lr: torch.Tensor
    hr: torch.Tensor
    noise: torch.Tensor | None = None
    unpaired: torch.Tensor | None = None
    seeds: list[int] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self):
        return self.hr.shape[0]

    def to(self, dtype) -> "Batch":
        conv = lambda t: None if t is None else t.to(dtype)  # noqa: E731
        return Batch(conv(self.lr), conv(self.hr), conv(self.noise), conv(self.unpaired),
                     self.seeds, self.sources)


def _chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float()


def _aligned_offsets(h: int, w: int, patch: int, s: int, rng) -> tuple[int, int]:
    """LR-grid offsets whose HR counterparts are exact multiples of the scale."""
    lp = patch // s
    r = int(rng.integers(0, h // s - lp + 1))
    c = int(rng.integers(0, w // s - lp + 1))
    return r, c


def sample_batch(manifest: PairManifest, batch_size: int, patch_size: int, stage: str, seed: int,
                 clean_fraction: float = 0.5, noise: NoiseSpec | None = None,
                 split: str = "train") -> Batch:
    """Draw ``batch_size`` aligned (LR, HR) patch pairs.

    H2L / JOINT batches pair clean HR with the nearest-downsampled noisy HR and
    also carry one noise plane and one unpaired noisy LR-sized crop per sample.
    L2H batches mix GENERATED_LR pairs with nearest-downsampled clean HR at
    ``clean_fraction``.
    """
    s = manifest.scale_factor
    if patch_size % s:
        raise DimensionError(f"patch {patch_size} not divisible by scale {s}")
    noise = noise or NoiseSpec(0.0, 0.05)
    lp = patch_size // s
    rng = np.random.default_rng(seed)
    seeds = [int(x) for x in rng.integers(0, 2 ** 31 - 1, size=batch_size)]

    def fits(path):
        h, w = _load_array(str(manifest.resolve(path))).shape[:2]
        return h >= patch_size and w >= patch_size

    if stage in ("H2L", "JOINT"):
        pool = [e for e in manifest.select(NOISY_HR, split) if fits(e.hr_clean_path)]
        unpaired_pool = [e for e in manifest.select(UNPAIRED_NOISY)
                         if min(_load_array(str(manifest.resolve(e.partner_path))).shape[:2]) >= lp]
        if not manifest.select(NOISY_HR, split):
            raise ValidationError(f"manifest has no {NOISY_HR} entries in split {split!r}")
        if not manifest.select(UNPAIRED_NOISY):
            raise ValidationError(f"manifest has no {UNPAIRED_NOISY} entries")
        if not pool or not unpaired_pool:
            raise DimensionError(f"patch {patch_size} larger than every image")
        hr, lr, nz, up, src = [], [], [], [], []
        for sd in seeds:
            r = np.random.default_rng(sd)
            e = pool[int(r.integers(len(pool)))]
            clean = _load_array(str(manifest.resolve(e.hr_clean_path)))
            noisy = _load_array(str(manifest.resolve(e.partner_path)))
            i, j = _aligned_offsets(*clean.shape[:2], patch_size, s, r)
            hr.append(clean[i * s:i * s + patch_size, j * s:j * s + patch_size])
            lr.append(noisy[i * s:i * s + patch_size:s, j * s:j * s + patch_size:s])
            nz.append(r.normal(noise.mean, noise.std_dev, (patch_size, patch_size, 1)))
            u = unpaired_pool[int(r.integers(len(unpaired_pool)))]
            ua = _load_array(str(manifest.resolve(u.partner_path)))
            ui = int(r.integers(0, ua.shape[0] - lp + 1))
            uj = int(r.integers(0, ua.shape[1] - lp + 1))
            up.append(ua[ui:ui + lp, uj:uj + lp])
            src.append(e.scene_id)
        return Batch(torch.stack([_chw(a) for a in lr]), torch.stack([_chw(a) for a in hr]),
                     torch.stack([_chw(a) for a in nz]), torch.stack([_chw(a) for a in up]),
                     seeds, src)

    if stage != "L2H":
        raise ValueError(f"unknown stage {stage!r}")
    gmsr = [e for e in manifest.select(GENERATED_LR, split) if fits(e.hr_clean_path)]
    clean_pool = [e for e in manifest.entries
                  if e.hr_clean_path is not None and e.split == split and fits(e.hr_clean_path)]
    if not [e for e in manifest.entries if e.hr_clean_path is not None and e.split == split]:
        raise ValidationError(f"manifest has no paired entries in split {split!r}")
    if not clean_pool:
        raise DimensionError(f"patch {patch_size} larger than every image")
    n_clean = batch_size if not gmsr else int(round(batch_size * clean_fraction))
    hr, lr, src = [], [], []
    for k, sd in enumerate(seeds):
        r = np.random.default_rng(sd)
        use_clean = k < n_clean
        e = (clean_pool if use_clean else gmsr)[int(r.integers(len(clean_pool if use_clean else gmsr)))]
        clean = _load_array(str(manifest.resolve(e.hr_clean_path)))
        i, j = _aligned_offsets(*clean.shape[:2], patch_size, s, r)
        hr.append(clean[i * s:i * s + patch_size, j * s:j * s + patch_size])
        if use_clean:
            lr.append(clean[i * s:i * s + patch_size:s, j * s:j * s + patch_size:s])
        else:
            low = _load_array(str(manifest.resolve(e.partner_path)))
            lr.append(low[i:i + lp, j:j + lp])
        src.append(e.scene_id)
    return Batch(torch.stack([_chw(a) for a in lr]), torch.stack([_chw(a) for a in hr]),
                 seeds=seeds, sources=src)


def list_pngs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFound(f"no such directory: {directory}")
    return sorted(directory.glob("*.png"))
