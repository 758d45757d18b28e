"""Generator determinism, planted structure, and feature-file round-trips."""

import numpy as np
import pytest

from m3em.binio import (
    FormatError,
    MagicMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from m3em.synthdata import (
    DomainShift,
    SyntheticDatasetSpec,
    generate,
    null_shift,
    read_modality,
    read_split,
    write_modality,
    write_split,
)

SMALL = SyntheticDatasetSpec(seed=42, n_source=200, n_target=200)


def test_same_seed_gives_identical_datasets():
    s1, t1 = generate(SMALL)
    s2, t2 = generate(SMALL)
    for a, b in ((s1, s2), (t1, t2)):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.flow, b.flow)
        assert np.array_equal(a.audio, b.audio)
        assert np.array_equal(a.verbs, b.verbs)
        assert np.array_equal(a.nouns, b.nouns)


def test_different_seed_gives_different_data():
    s1, _ = generate(SMALL)
    s2, _ = generate(SyntheticDatasetSpec(seed=43, n_source=200, n_target=200))
    assert not np.array_equal(s1.rgb, s2.rgb)


def test_null_shift_matches_source_distribution():
    spec = null_shift(SyntheticDatasetSpec(seed=7, n_source=1000, n_target=1000))
    source, target = generate(spec)
    # compare per-channel means of pooled features; 3 sigma of the mean
    for modality in ("rgb", "flow", "audio"):
        a = source.modality(modality).reshape(1000, -1)
        b = target.modality(modality).reshape(1000, -1)
        pooled_a, pooled_b = a.mean(axis=1), b.mean(axis=1)
        se = np.sqrt(pooled_a.var() / 1000 + pooled_b.var() / 1000)
        assert abs(pooled_a.mean() - pooled_b.mean()) < 3.0 * se + 1e-9


def test_shift_moves_only_noninformative_channels():
    spec = SyntheticDatasetSpec(seed=9, n_source=2000, n_target=2000,
                                shift=DomainShift(bias=1.0, noise_scale=1.0))
    source, target = generate(spec)
    for modality in ("rgb", "audio"):
        inf = list(spec.informative[modality])
        noninf = [ch for ch in range(spec.channels) if ch not in inf]
        # per-(channel, cell) sample means; the bias pattern is fixed per cell
        delta = np.abs(target.modality(modality).mean(axis=0)
                       - source.modality(modality).mean(axis=0))
        assert np.all(delta[noninf] > 0.5), f"{modality} biased channels must move"
        assert np.all(delta[inf] < 0.25), f"{modality} informative channels must not move"


def test_infinite_snr_nearest_centroid_is_perfect():
    spec = SyntheticDatasetSpec(seed=11, n_source=100, n_target=100, snr=np.inf,
                                shift=DomainShift(bias=0.0, noise_scale=1.0))
    source, target = generate(spec)

    # independent oracle: centroid of each (verb, noun) pair from the source
    # split's informative features, nearest-centroid prediction on both splits
    def informative_vector(split, i):
        parts = []
        i0, j0, i1, j1 = spec.shared_region
        for modality in ("rgb", "flow"):
            feats = split.modality(modality)[i]
            for ch in spec.informative[modality]:
                parts.append(feats[ch, i0:i1, j0:j1].mean())
        for ch in spec.informative["audio"]:
            parts.append(split.audio[i][ch])
        return np.array(parts)

    centroids = {}
    for i in range(source.n):
        key = (int(source.verbs[i]), int(source.nouns[i]))
        centroids.setdefault(key, []).append(informative_vector(source, i))
    centroids = {k: np.mean(v, axis=0) for k, v in centroids.items()}

    for split in (source, target):
        hits = 0
        for i in range(split.n):
            vec = informative_vector(split, i)
            best = min(centroids, key=lambda k: np.linalg.norm(vec - centroids[k]))
            hits += best == (int(split.verbs[i]), int(split.nouns[i]))
        assert hits == split.n


def test_source_probe_degrades_on_target():
    """A ridge probe fit on source features loses accuracy on the target
    domain (>= 5 points averaged over 5 seeds): the planted shift is real."""

    def probe_gap(spec):
        source, target = generate(spec)

        def flatten(split):
            return np.concatenate([split.rgb.reshape(split.n, -1),
                                   split.flow.reshape(split.n, -1),
                                   split.audio], axis=1)

        xs, xt = flatten(source), flatten(target)
        n_train = int(source.n * 0.8)
        pairs = source.verbs * spec.noun_classes + source.nouns
        k = spec.verb_classes * spec.noun_classes
        onehot = np.zeros((n_train, k))
        onehot[np.arange(n_train), pairs[:n_train]] = 1.0
        xtr = xs[:n_train]
        w = np.linalg.solve(xtr.T @ xtr + 100.0 * np.eye(xs.shape[1]), xtr.T @ onehot)

        def accuracy(x, verbs, nouns):
            pred = np.argmax(x @ w, axis=1)
            return float(np.mean((pred // spec.noun_classes == verbs)
                                 & (pred % spec.noun_classes == nouns)))

        held_out = accuracy(xs[n_train:], source.verbs[n_train:], source.nouns[n_train:])
        on_target = accuracy(xt, target.verbs, target.nouns)
        return held_out - on_target

    gaps = [probe_gap(SyntheticDatasetSpec(seed=1000 + s)) for s in range(5)]
    assert float(np.mean(gaps)) >= 0.05, gaps


def test_labels_roughly_uniform():
    spec = SyntheticDatasetSpec(seed=13, n_source=5000, n_target=0)
    source, _ = generate(spec)
    counts = np.bincount(source.verbs, minlength=5)
    expected = 1000.0
    sigma = np.sqrt(5000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - expected) < 4 * sigma)


def test_spec_validation_errors():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(snr=0.0).validate()
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(informative={"rgb": (0,), "flow": (0,),
                                          "audio": (2,)}).validate()
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(shared_region=(0, 0, 9, 4)).validate()
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(informative={"rgb": (99,), "flow": (1,),
                                          "audio": (2,)}).validate()


# ---------------------------------------------------------------------------
# feature files


def test_roundtrip_is_bit_exact(tmp_path):
    source, target = generate(SMALL)
    write_split(tmp_path, "source", source)
    write_split(tmp_path, "target", target)
    back = read_split(tmp_path, "source")
    assert np.array_equal(back.rgb, source.rgb)
    assert np.array_equal(back.flow, source.flow)
    assert np.array_equal(back.audio, source.audio)
    assert np.array_equal(back.verbs, source.verbs)
    assert np.array_equal(back.nouns, source.nouns)


def test_write_is_deterministic(tmp_path):
    source, _ = generate(SMALL)
    a, b = tmp_path / "a.mmft", tmp_path / "b.mmft"
    write_modality(a, "rgb", source.rgb, source.verbs, source.nouns)
    write_modality(b, "rgb", source.rgb, source.verbs, source.nouns)
    assert a.read_bytes() == b.read_bytes()


def test_unlabeled_file_roundtrip(tmp_path):
    rng = np.random.RandomState(0)
    feats = rng.randn(10, 3, 2, 2)
    path = tmp_path / "u.mmft"
    write_modality(path, "rgb", feats)
    name, back, verbs, nouns = read_modality(path)
    assert name == "rgb" and verbs is None and nouns is None
    assert np.array_equal(back, feats)


def test_corrupted_magic(tmp_path):
    source, _ = generate(SMALL)
    path = tmp_path / "f.mmft"
    write_modality(path, "audio", source.audio, source.verbs, source.nouns)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(MagicMismatchError):
        read_modality(path)


def test_corrupted_version(tmp_path):
    source, _ = generate(SMALL)
    path = tmp_path / "f.mmft"
    write_modality(path, "audio", source.audio, source.verbs, source.nouns)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (7).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_modality(path)


def test_truncated_payload(tmp_path):
    source, _ = generate(SMALL)
    path = tmp_path / "f.mmft"
    write_modality(path, "audio", source.audio, source.verbs, source.nouns)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(TruncatedFileError):
        read_modality(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError) as err:
        read_split(tmp_path, "source")
    assert "source_rgb.mmft" in str(err.value)


def test_label_disagreement_detected(tmp_path):
    source, _ = generate(SMALL)
    write_split(tmp_path, "source", source)
    wrong = source.verbs.copy()
    wrong[0] = (wrong[0] + 1) % 5
    write_modality(tmp_path / "source_flow.mmft", "flow", source.flow, wrong, source.nouns)
    with pytest.raises(FormatError):
        read_split(tmp_path, "source")
