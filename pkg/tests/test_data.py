import json

import numpy as np
import pytest
import torch

from srdgan.data import (GENERATED_LR, NOISY_HR, UNPAIRED_NOISY, CorpusConfig, ManifestEntry, PairManifest,
                         burst_mean, iteration_seed, load_manifest, noisy_frame, procedural_scene, sample_batch,
                         save_manifest, synth_burst_corpus, synthesize_gmsr)
from srdgan.errors import DimensionError, FormatError, NotFound, ValidationError
from srdgan.imaging import Image, NoiseSpec, load_image, save_image
from srdgan.networks import H2L_GEN, NetworkSpec, build_network


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(n_scenes=3, n_unpaired=2, image_size=64, burst_size=8)
    return synth_burst_corpus(cfg, 7, root), root


def test_corpus_layout(corpus):
    man, root = corpus
    assert len(man.select(NOISY_HR)) == 3
    assert len(man.select(UNPAIRED_NOISY)) == 2
    man.check()
    for p in man.paths():
        img = load_image(man.resolve(p))
        assert img.shape == (64, 64, 3)
    assert (root / "scene_0000" / "hr_clean_0.png").is_file()
    assert (root / "unpaired_0001" / "unpaired_noisy_0.png").is_file()


def test_corpus_is_seed_deterministic(tmp_path):
    cfg = CorpusConfig(n_scenes=1, n_unpaired=1, image_size=32, burst_size=3)
    synth_burst_corpus(cfg, 5, tmp_path / "a")
    synth_burst_corpus(cfg, 5, tmp_path / "b")
    synth_burst_corpus(cfg, 6, tmp_path / "c")
    rel = "scene_0000/hr_noisy_0.png"
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert (tmp_path / "a" / rel).read_bytes() != (tmp_path / "c" / rel).read_bytes()


@pytest.mark.parametrize("level", [0.1, 0.5, 0.8])
def test_noise_model_law_of_large_numbers(level):
    sr, ss = 0.02, 0.06
    clean = np.full((200, 200, 3), level)
    rng = np.random.default_rng(0)
    sigma = sr + ss * level
    frame = noisy_frame(clean, rng, sr, ss) - level
    assert abs(frame.std() / sigma - 1) < 0.02
    assert abs(frame.mean()) < 5 * sigma / np.sqrt(frame.size)
    k = 16
    fused = burst_mean(clean, k, rng, sr, ss) - level
    assert abs(fused.std() / (sigma / np.sqrt(k)) - 1) < 0.02


def test_corpus_noise_is_signal_dependent(tmp_path):
    cfg = CorpusConfig(n_scenes=4, n_unpaired=0, image_size=128, burst_size=20)
    man = synth_burst_corpus(cfg, 1, tmp_path)
    xs, rs = [], []
    for e in man.select(NOISY_HR):
        c = load_image(man.resolve(e.hr_clean_path)).data
        n = load_image(man.resolve(e.partner_path)).data
        xs.append(c.ravel())
        rs.append((n - c).ravel())
    x, r = np.concatenate(xs), np.concatenate(rs)
    # held-out frame minus the (K-1)-frame mean: variance sigma(x)^2 * (1 + 1/(K-1))
    inflate = np.sqrt(1 + 1 / (cfg.burst_size - 1))
    checked = 0
    for lo, hi in [(0.15, 0.25), (0.45, 0.55), (0.7, 0.8)]:
        sel = (x >= lo) & (x < hi)
        if sel.sum() < 2000:
            continue
        want = (cfg.sigma_read + cfg.sigma_shot * x[sel].mean()) * inflate
        assert abs(r[sel].std() / want - 1) < 0.08
        checked += 1
    assert checked >= 2


def test_manifest_roundtrip(corpus, tmp_path):
    man, root = corpus
    path = save_manifest(man, tmp_path / "m" / "manifest.json")
    back = load_manifest(path)
    assert back.entries == man.entries
    assert back.scale_factor == man.scale_factor
    assert back.missing_paths() == []


def test_manifest_relative_root(tmp_path):
    (tmp_path / "data").mkdir()
    man = PairManifest([ManifestEntry("a.png", "b.png", NOISY_HR, "s")], 4, str(tmp_path / "data"))
    save_manifest(man, tmp_path / "data" / "manifest.json")
    assert json.loads((tmp_path / "data" / "manifest.json").read_text())["root"] == "."
    moved = tmp_path / "moved"
    (tmp_path / "data").rename(moved)
    assert load_manifest(moved / "manifest.json").resolve("a.png") == moved / "a.png"


def test_manifest_version_and_missing(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"version": 99, "scale_factor": 4, "entries": []}))
    with pytest.raises(FormatError):
        load_manifest(p)
    p.write_text("{nope")
    with pytest.raises(FormatError):
        load_manifest(p)
    with pytest.raises(NotFound):
        load_manifest(tmp_path / "absent.json")


def test_manifest_lists_missing_paths(tmp_path):
    man = PairManifest([ManifestEntry("x/clean.png", "x/noisy.png", NOISY_HR, "x"),
                        ManifestEntry(None, "u.png", UNPAIRED_NOISY, "u")], 4, str(tmp_path))
    assert man.missing_paths() == ["x/clean.png", "x/noisy.png", "u.png"]
    with pytest.raises(ValidationError) as e:
        man.check()
    assert e.value.items == ["x/clean.png", "x/noisy.png", "u.png"]


def test_manifest_invariants(tmp_path):
    save_image(Image(np.zeros((16, 16, 3))), tmp_path / "c.png")
    save_image(Image(np.zeros((8, 8, 3))), tmp_path / "n.png")
    save_image(Image(np.zeros((3, 4, 3))), tmp_path / "l.png")
    bad = PairManifest([ManifestEntry("c.png", "n.png", NOISY_HR, "a"),
                        ManifestEntry("c.png", "l.png", GENERATED_LR, "a", "val")], 4, str(tmp_path))
    with pytest.raises(ValidationError) as e:
        bad.check()
    text = " ".join(e.value.items)
    assert "noisy HR 8x8" in text
    assert "LR 3x4" in text
    assert "listed twice: c.png" in text
    assert "straddles" in text


def test_iteration_seed_stable():
    assert iteration_seed(0, 5) == iteration_seed(0, 5)
    assert len({iteration_seed(0, i) for i in range(100)}) == 100
    assert iteration_seed(0, 5) != iteration_seed(1, 5)


def test_sample_batch_h2l_alignment(corpus):
    man, _ = corpus
    b = sample_batch(man, 3, 32, "H2L", 11)
    assert b.hr.shape == (3, 3, 32, 32)
    assert b.lr.shape == b.unpaired.shape == (3, 3, 8, 8)
    assert b.noise.shape == (3, 1, 32, 32)
    # each LR patch is exactly the top-left-sampled noisy HR at the same aligned location
    for k, scene in enumerate(b.sources):
        e = [x for x in man.select(NOISY_HR) if x.scene_id == scene][0]
        clean = load_image(man.resolve(e.hr_clean_path)).data
        noisy = load_image(man.resolve(e.partner_path)).data
        hr = b.hr[k].numpy().transpose(1, 2, 0)
        hits = [(i, j) for i in range(0, 64 - 31) for j in range(0, 64 - 31)
                if np.allclose(clean[i:i + 32, j:j + 32], hr, atol=1e-6)]
        assert len(hits) == 1
        i, j = hits[0]
        assert i % 4 == 0 and j % 4 == 0
        np.testing.assert_allclose(b.lr[k].numpy().transpose(1, 2, 0), noisy[i:i + 32:4, j:j + 32:4], atol=1e-6)


def test_sample_batch_deterministic(corpus):
    man, _ = corpus
    a, b = sample_batch(man, 2, 16, "H2L", 3), sample_batch(man, 2, 16, "H2L", 3)
    for x, y in zip((a.lr, a.hr, a.noise, a.unpaired), (b.lr, b.hr, b.noise, b.unpaired)):
        assert torch.equal(x, y)
    assert not torch.equal(a.hr, sample_batch(man, 2, 16, "H2L", 4).hr)


def test_sample_batch_noise_statistics(corpus):
    man, _ = corpus
    b = sample_batch(man, 4, 64, "H2L", 0, noise=NoiseSpec(0.1, 0.2))
    assert abs(b.noise.mean().item() - 0.1) < 0.01
    assert abs(b.noise.std().item() - 0.2) < 0.01


def test_sample_batch_errors(corpus):
    man, _ = corpus
    with pytest.raises(DimensionError):
        sample_batch(man, 1, 30, "H2L", 0)
    with pytest.raises(DimensionError):
        sample_batch(man, 1, 128, "H2L", 0)
    no_unpaired = PairManifest(man.select(NOISY_HR), 4, man.root)
    with pytest.raises(ValidationError):
        sample_batch(no_unpaired, 1, 16, "H2L", 0)


def test_gmsr_and_l2h_batches(corpus, tmp_path):
    man, _ = corpus
    h2l = build_network(NetworkSpec(H2L_GEN, base_channels=4, num_blocks=1))
    clean = [man.resolve(e.hr_clean_path) for e in man.select(NOISY_HR)]
    clean.append(Image(np.zeros((10, 12, 3))))  # not divisible by 4: skipped
    gm = synthesize_gmsr(h2l, clean, NoiseSpec(0, 0.05), 0, tmp_path)
    assert len(gm.entries) == 3
    gm.check()
    for e in gm.entries:
        assert load_image(gm.resolve(e.partner_path)).shape == (16, 16, 3)
    b = sample_batch(gm, 4, 32, "L2H", 1, clean_fraction=0.5)
    assert b.lr.shape == (4, 3, 8, 8) and b.hr.shape == (4, 3, 32, 32)
    # the first half are clean pairs: LR is the exact nearest downsample of HR
    for k in range(2):
        torch.testing.assert_close(b.lr[k], b.hr[k, :, ::4, ::4])
    gen = load_image(gm.resolve(gm.entries[0].partner_path)).data
    b = sample_batch(PairManifest(gm.entries[:1], 4, gm.root), 1, 64, "L2H", 0, clean_fraction=0.0)
    np.testing.assert_allclose(b.lr[0].numpy().transpose(1, 2, 0), gen, atol=1e-6)


def test_burst_mean_converges_to_clean_scene():
    clean = procedural_scene(4, np.random.default_rng(2))
    sr, ss, k = 0.02, 0.06, 10_000
    fused = burst_mean(clean, k, np.random.default_rng(9), sr, ss)
    bound = 3 * (sr + ss * clean) / np.sqrt(k)
    assert np.all(np.abs(fused - clean) <= bound)
