import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avdetect.data import (FAKE, FAKE_KINDS, REAL, SPLITS, CorpusConfigError, CorpusSpec, build_split,
                           build_splits, corpus_hash, fingerprint, fingerprint_channels, gen_fake,
                           gen_real, latent, projections, read_corpus, write_corpus)

from conftest import tiny_corpus


def test_splits_are_deterministic():
    a, b = build_splits(tiny_corpus(seed=3)), build_splits(tiny_corpus(seed=3))
    for name in SPLITS:
        np.testing.assert_array_equal(a[name].audio, b[name].audio)
        np.testing.assert_array_equal(a[name].video, b[name].video)
        np.testing.assert_array_equal(a[name].labels, b[name].labels)


def test_seed_changes_the_corpus():
    a, b = build_splits(tiny_corpus(seed=3)), build_splits(tiny_corpus(seed=4))
    assert not np.array_equal(a["train"].video, b["train"].video)


@settings(max_examples=25, deadline=None)
@given(style=st.integers(0, 7), sid=st.integers(0, 10_000))
def test_noiseless_real_clip_is_exact_projection(style, sid):
    spec = tiny_corpus(sigma=0.0)
    P_a, P_v = projections(spec)
    z = latent(spec, style, sid)
    s = gen_real(style, sid, spec)
    assert np.abs(s.audio - z @ P_a.T).max() < 1e-9
    assert np.abs(s.video - z @ P_v.T).max() < 1e-9


@pytest.mark.parametrize("gen", [1, 2, 5])
def test_fingerprint_is_exactly_additive(gen):
    spec = tiny_corpus(visual_resynth=0.0)
    real = gen_real(2, 17, spec)
    fake = gen_fake("visual_fingerprint", gen, 2, 17, spec)
    np.testing.assert_array_equal(fake.audio, real.audio)
    np.testing.assert_array_equal(fake.video, real.video + fingerprint(gen, spec))


@pytest.mark.parametrize("m", [0.25, 1.0])
def test_resynthesised_video_mixes_in_an_independent_trajectory(m):
    spec = tiny_corpus(sigma=0.0, visual_resynth=m)
    _, P_v = projections(spec)
    z = np.sqrt(1 - m) * latent(spec, 4, 9) + np.sqrt(m) * latent(spec, 4, 9, tag="resynth_latent")
    fake = gen_fake("visual_fingerprint", 2, 4, 9, spec)
    np.testing.assert_array_equal(fake.audio, gen_real(4, 9, spec).audio)
    np.testing.assert_allclose(fake.video, z @ P_v.T + fingerprint(2, spec), atol=1e-12)


def test_audio_swap_keeps_video_and_replaces_audio():
    spec = tiny_corpus()
    real = gen_real(1, 5, spec)
    fake = gen_fake("audio_swap", 3, 1, 5, spec)
    np.testing.assert_array_equal(fake.video, real.video)
    assert not np.allclose(fake.audio, real.audio)
    both = gen_fake("both", 3, 1, 5, spec)
    np.testing.assert_array_equal(both.audio, fake.audio)
    np.testing.assert_array_equal(both.video, real.video + fingerprint(3, spec))


def test_fingerprints_own_disjoint_channel_blocks():
    spec = CorpusSpec()
    masks = [fingerprint_channels(g, spec) for g in range(1, spec.n_generators + 1)]
    np.testing.assert_array_equal(np.sum(masks, axis=0), np.ones(spec.d_vision))
    for g, mask in enumerate(masks, start=1):
        fp = fingerprint(g, spec)
        assert not fp[:, ~mask].any()
        np.testing.assert_array_equal(np.abs(fp[:, mask]), spec.fingerprint_scale)
        assert all(np.array_equal(fp[t], fp[0]) for t in range(spec.seq_len))


def test_too_few_vision_channels_rejected():
    with pytest.raises(CorpusConfigError, match="d_vision"):
        CorpusSpec(d_vision=4)


def test_split_pools():
    spec = tiny_corpus(n=60)
    splits = build_splits(spec)
    held_in_g, held_in_s = set(spec.held_in_generators), set(spec.held_in_styles)
    for name, (gens, styles) in {"train": (held_in_g, held_in_s), "in_domain": (held_in_g, held_in_s),
                                 "open_set_generator": (set(spec.held_out_generators), held_in_s),
                                 "open_set_style": (held_in_g, set(spec.held_out_styles)),
                                 "open_set_full": (set(spec.held_out_generators),
                                                   set(spec.held_out_styles))}.items():
        sp = splits[name]
        fake = sp.labels == FAKE
        assert set(sp.generator_id[fake]) <= gens
        assert not sp.generator_id[~fake].any()
        assert set(sp.style_id) <= styles
        assert {sp.fake_kind[i] for i in np.flatnonzero(fake)} <= set(FAKE_KINDS)


def test_sample_ids_are_disjoint_and_contiguous():
    splits = build_splits(tiny_corpus(n=25))
    ids = np.concatenate([splits[name].sample_id for name in SPLITS])
    np.testing.assert_array_equal(ids, np.arange(len(ids)))


def test_real_fraction_and_counts():
    spec = tiny_corpus(n=50, real_fraction=0.3)
    sp = build_split(spec, "train", 0)
    assert len(sp) == 50 and (sp.labels == REAL).sum() == 15


def test_default_counts():
    assert CorpusSpec().counts == {"train": 32000, "in_domain": 1000, "open_set_generator": 1000,
                                   "open_set_style": 1000, "open_set_full": 1000}


def test_empty_split():
    sp = build_split(tiny_corpus(n=0), "train", 0)
    assert len(sp) == 0 and sp.audio.shape == (0, 3, 3)


def test_kind_weights_respected():
    spec = tiny_corpus(n=200, fake_kind_weights=(0.0, 1.0, 0.0))
    sp = build_split(spec, "train", 0)
    assert {sp.fake_kind[i] for i in np.flatnonzero(sp.labels == FAKE)} == {"visual_fingerprint"}


@pytest.mark.parametrize("kw,field", [
    ({"counts": {"bogus": 3}}, "counts"),
    ({"held_out_generators": (1, 2, 3, 4, 5, 6)}, "held_out_generators"),
    ({"held_out_styles": (9,)}, "held_out_styles"),
    ({"real_fraction": 1.0}, "real_fraction"),
    ({"sigma": -0.1}, "sigma"),
    ({"visual_resynth": 1.5}, "visual_resynth"),
    ({"fake_kind_weights": (1.0, 1.0)}, "fake_kind_weights"),
])
def test_spec_validation(kw, field):
    with pytest.raises(CorpusConfigError, match=field):
        CorpusSpec(**kw)


def test_spec_round_trip():
    spec = tiny_corpus(seed=7)
    assert CorpusSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(CorpusConfigError, match="unknown"):
        CorpusSpec.from_dict({"colour": 1})


def test_bad_generator_and_kind():
    spec = tiny_corpus()
    with pytest.raises(ValueError):
        fingerprint(0, spec)
    with pytest.raises(ValueError):
        gen_fake("lip_sync", 1, 0, 0, spec)
    with pytest.raises(ValueError):
        gen_real(99, 0, spec)


def test_write_read_round_trip(tmp_path):
    spec = tiny_corpus(n=12)
    splits = build_splits(spec)
    digest = write_corpus(splits, tmp_path, spec)
    assert (tmp_path / "corpus.hash").read_text().strip() == digest == corpus_hash(tmp_path)
    back = read_corpus(tmp_path)
    for name in SPLITS:
        np.testing.assert_array_equal(back[name].audio, splits[name].audio)
        np.testing.assert_array_equal(back[name].video, splits[name].video)
        np.testing.assert_array_equal(back[name].sample_id, splits[name].sample_id)
        assert back[name].fake_kind == splits[name].fake_kind
    assert set(read_corpus(tmp_path, ["in_domain"])) == {"in_domain"}


def test_hash_is_reproducible_and_content_sensitive(tmp_path):
    spec = tiny_corpus(n=8)
    h1 = write_corpus(build_splits(spec), tmp_path / "a")
    h2 = write_corpus(build_splits(spec), tmp_path / "b")
    assert h1 == h2
    h3 = write_corpus(build_splits(tiny_corpus(n=8, seed=1)), tmp_path / "c")
    assert h3 != h1


# -- learnability oracles ---------------------------------------------------------

def _latent_agreement(sample, spec):
    """Mean per-dimension correlation of the latents recovered from each stream
    through the known projections: near 1 when both come from one trajectory."""
    P_a, P_v = projections(spec)
    z_a = sample.audio @ np.linalg.pinv(P_a).T
    z_v = sample.video @ np.linalg.pinv(P_v).T
    return np.mean([np.corrcoef(z_a[:, k], z_v[:, k])[0, 1] for k in range(spec.d_latent)])


def test_real_streams_agree_more_than_fake_ones():
    spec = CorpusSpec()
    real = [_latent_agreement(gen_real(i % 6, i, spec), spec) for i in range(200)]
    swap = [_latent_agreement(gen_fake("audio_swap", 1, i % 6, i, spec), spec) for i in range(200)]
    resynth = [_latent_agreement(gen_fake("visual_fingerprint", 1, i % 6, i, spec), spec)
               for i in range(200)]
    assert np.mean(real) > 0.9 and abs(np.mean(swap)) < 0.2
    # half the trajectory's power is replaced, so agreement drops to about sqrt(1/2)
    assert 0.5 < np.mean(resynth) < 0.85


@pytest.mark.parametrize("real_fraction", [0.5, 0.3])
def test_label_balance_within_one_sample(real_fraction):
    spec = tiny_corpus(n=77, real_fraction=real_fraction)
    for sp in build_splits(spec).values():
        assert abs((sp.labels == REAL).sum() - real_fraction * len(sp)) <= 1


def test_linear_probe_separates_held_in_fingerprints_only():
    """A logistic probe on frame-mean video, trained on fingerprint-only fakes,
    catches held-in generators but sits at chance on held-out ones: their
    channels never moved during training."""
    from sklearn.linear_model import LogisticRegression

    spec = CorpusSpec(counts={"train": 3000, "in_domain": 1000, "open_set_generator": 1000},
                      fake_kind_weights=(0.0, 1.0, 0.0))
    splits = build_splits(spec)
    feats = {k: v.video.mean(axis=1) for k, v in splits.items() if len(v)}
    clf = LogisticRegression(max_iter=5000).fit(feats["train"], splits["train"].labels)
    acc_in = clf.score(feats["in_domain"], splits["in_domain"].labels)
    acc_out = clf.score(feats["open_set_generator"], splits["open_set_generator"].labels)
    assert acc_in >= 0.9
    assert 0.4 <= acc_out <= 0.6


def test_nearest_neighbour_on_raw_features_is_weak():
    from sklearn.neighbors import KNeighborsClassifier

    spec = CorpusSpec()
    train = build_split(spec, "train", 0)
    test = build_split(spec, "open_set_full", 20_000)
    flat = lambda sp: np.concatenate([sp.audio.reshape(len(sp), -1), sp.video.reshape(len(sp), -1)], 1)
    acc = KNeighborsClassifier(1).fit(flat(train), train.labels).score(flat(test), test.labels)
    assert acc < 0.75
