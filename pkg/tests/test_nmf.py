import numpy as np
import pytest

from nmfsed import nmf
from nmfsed.dsp import FeatureConfig
from nmfsed.events import Event


def _rank1(seed, m=64, n=100):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, m)
    h = rng.uniform(0.1, 1.0, n)
    return np.outer(w, h)


# --------------------------------------------------------------- factorize

def test_factorize_recovers_rank1():
    V = _rank1(0)
    f = nmf.factorize(V, r=1, iters=500, seed=1)
    rel = np.linalg.norm(V - f.W @ f.H) / np.linalg.norm(V)
    assert rel < 1e-3


def test_divergence_non_increasing_random_instances():
    rng = np.random.default_rng(42)
    for trial in range(20):
        m, n = rng.integers(4, 32, 2)
        r = int(rng.integers(1, 4))
        V = rng.uniform(0, 1, (m, n))
        f = nmf.factorize(V, r=r, iters=40, seed=trial)
        trace = np.asarray(f.divergence_trace)
        assert np.all(np.diff(trace) <= 1e-9), f"divergence rose at trial {trial}"


def test_one_more_iteration_never_hurts():
    V = np.random.default_rng(7).uniform(0, 1, (12, 9))
    one = nmf.factorize(V, r=2, iters=1, seed=3)
    two = nmf.factorize(V, r=2, iters=2, seed=3)
    assert two.divergence_trace[1] <= one.divergence_trace[0] + 1e-9


def test_factorize_deterministic():
    V = np.random.default_rng(8).uniform(0, 2, (8, 5))
    a = nmf.factorize(V, r=2, iters=50, seed=11)
    b = nmf.factorize(V, r=2, iters=50, seed=11)
    assert np.array_equal(a.W, b.W)
    assert np.array_equal(a.H, b.H)
    assert a.divergence_trace == b.divergence_trace


def test_factorize_keeps_factors_nonnegative():
    V = np.random.default_rng(9).uniform(0, 1, (16, 20))
    f = nmf.factorize(V, r=3, iters=100, seed=0)
    assert np.all(f.W >= 0)
    assert np.all(f.H >= 0)


def test_factorize_rejects_bad_input():
    with pytest.raises(ValueError, match="empty spectrogram"):
        nmf.factorize(np.zeros((4, 4)), r=1)
    with pytest.raises(ValueError, match="nonnegative"):
        nmf.factorize(np.array([[1.0, -0.1], [0.2, 0.3]]), r=1)


# --------------------------------------------------------- extract_template

def test_extract_template_recovers_constant_spectrum():
    rng = np.random.default_rng(10)
    s = rng.uniform(0.2, 1.0, 64)
    spec = np.zeros((640, 64))
    spec[100:200] = s  # active region is rank-1 by construction
    tpl = nmf.extract_template(spec, range(100, 200))
    cos = np.dot(tpl.spectrum, s) / (np.linalg.norm(tpl.spectrum) * np.linalg.norm(s))
    assert cos > 0.999
    assert tpl.spectrum.max() == pytest.approx(1.0)


def test_extract_template_full_mask_equals_plain_factorize():
    rng = np.random.default_rng(11)
    spec = rng.uniform(0, 1, (50, 16))
    tpl = nmf.extract_template(spec, range(50), iters=30, seed=5)
    f = nmf.factorize(spec.T, r=1, iters=30, seed=5)
    assert np.array_equal(tpl.spectrum, f.W[:, 0] / f.W[:, 0].max())


def test_extract_template_masks_other_events():
    # speech on frames 0..99, cat on frames 99..109, disjoint mel bands
    speech = np.zeros(64)
    speech[5:15] = 1.0
    cat = np.zeros(64)
    cat[40:50] = 1.0
    spec = np.zeros((640, 64))
    spec[0:100] += speech
    spec[99:110] += cat
    tpl_speech = nmf.extract_template(spec, range(0, 100), label="Speech")
    tpl_cat = nmf.extract_template(spec, range(99, 110), label="Cat")
    # each template concentrates its mass in its own band
    assert tpl_speech.spectrum[5:15].sum() > 5 * tpl_speech.spectrum[40:50].sum()
    assert tpl_cat.spectrum[40:50].sum() > 5 * tpl_cat.spectrum[5:15].sum()


def test_extract_template_all_zero_mask_errors():
    spec = np.zeros((640, 64))
    spec[0:10] = 1.0
    with pytest.raises(ValueError, match="all-zero"):
        nmf.extract_template(spec, range(500, 510))


# --------------------------------------------------------- build_dictionary

def _hop():
    return FeatureConfig().hop_seconds


def test_build_dictionary_single_event():
    spec = np.random.default_rng(12).uniform(0.1, 1, (640, 64))
    events = [Event("Dog", 0.0, 10.0)]
    d = nmf.build_dictionary([("clip0", spec, events)])
    assert set(d) == {"Dog"}
    assert len(d["Dog"]) == 1
    assert d["Dog"][0].source_clip == "clip0"


def test_build_dictionary_two_classes_from_one_clip():
    spec = np.zeros((640, 64))
    spec[0:100, 5:15] = 1.0
    spec[99:110, 40:50] = 1.0
    hop = _hop()
    events = [Event("Speech", 0.0, 100 * hop), Event("Cat", 99 * hop, 110 * hop)]
    d = nmf.build_dictionary([("clipA", spec, events)])
    assert set(d) == {"Cat", "Speech"}
    assert len(d["Speech"]) == 1 and len(d["Cat"]) == 1


def test_build_dictionary_count_bookkeeping():
    # oracle: expected per-class counts tallied directly from the event lists
    rng = np.random.default_rng(13)
    labels = ["a", "b", "c"]
    strong_set = []
    expected = {lab: 0 for lab in labels}
    for i in range(10):
        spec = rng.uniform(0.05, 1, (640, 64))
        events = []
        for j in range(3):
            lab = labels[int(rng.integers(0, 3))]
            onset = float(rng.uniform(0, 8))
            events.append(Event(lab, onset, onset + 1.0))
            expected[lab] += 1
        strong_set.append((f"clip{i}", spec, events))
    d = nmf.build_dictionary(strong_set, nmf_cfg=nmf.NmfConfig(iters=20))
    assert {lab: len(tpls) for lab, tpls in d.items()} == expected


def test_build_dictionary_errors_on_unusable_class():
    spec = np.zeros((640, 64))
    spec[0:100, 5:15] = 1.0  # only the first 100 frames have energy
    hop = _hop()
    events = [Event("loud", 0.0, 100 * hop), Event("silent", 5.0, 6.0)]
    with pytest.raises(ValueError, match="silent"):
        nmf.build_dictionary([("clip0", spec, events)])


def test_build_dictionary_strips_stationary_floor():
    # constant per-mel floor (dyadic, so subtraction is exact) + one band
    # event; the event-free frames pin the floor estimate, and the template
    # support collapses to the event band
    hop = _hop()
    spec = np.full((640, 64), 0.25)
    spec[100:200, 20:30] += 1.0
    events = [Event("band", 100.5 * hop, 199.5 * hop)]
    d = nmf.build_dictionary([("c", spec, events)])
    s = d["band"][0].spectrum
    assert s.max() == pytest.approx(1.0)
    assert (s[:20] == 0.0).all() and (s[30:] == 0.0).all()
    assert (s[20:30] > 0.9).all()


def test_build_dictionary_skips_frames_shared_with_overlapping_events():
    # two events of different classes overlap in time; each template must be
    # extracted from the frames where its own event is the only one active,
    # so neither class's band leaks into the other's template
    hop = _hop()
    spec = np.zeros((400, 64))
    spec[100:200, 10:16] = 3.0
    spec[150:300, 40:51] = 2.5
    events = [Event("low", 100.5 * hop, 199.5 * hop),
              Event("high", 150.5 * hop, 299.5 * hop)]
    d = nmf.build_dictionary([("c", spec, events)])
    lo, hi = d["low"][0].spectrum, d["high"][0].spectrum
    assert (lo[40:51] == 0.0).all() and (lo[10:16] > 0.9).all()
    assert (hi[10:16] == 0.0).all() and (hi[40:51] > 0.9).all()


def test_build_dictionary_contained_event_falls_back_to_full_span():
    # the inner event has no frames of its own; extraction falls back to its
    # full span rather than skipping the instance
    hop = _hop()
    spec = np.zeros((400, 64))
    spec[100:300, 10:16] = 2.0
    spec[150:250, 40:51] = 2.0
    events = [Event("outer", 100.5 * hop, 299.5 * hop),
              Event("inner", 150.5 * hop, 249.5 * hop)]
    d = nmf.build_dictionary([("c", spec, events)])
    assert (d["inner"][0].spectrum[40:51] > 0.9).all()
    # the outer event still has clean frames on both sides of the overlap
    assert (d["outer"][0].spectrum[40:51] == 0.0).all()


def test_build_dictionary_template_floor_zeroes_trace_bins():
    # a faint out-of-band smudge is not stationary, so floor removal keeps
    # it; the template floor is what zeroes it
    hop = _hop()
    spec = np.zeros((640, 64))
    spec[100:200, 20:30] = 1.0
    spec[100:200, 40] = 0.02
    events = [Event("band", 100.5 * hop, 199.5 * hop)]
    d = nmf.build_dictionary([("c", spec, events)])
    assert d["band"][0].spectrum[40] == 0.0
    assert (d["band"][0].spectrum[20:30] > 0.9).all()
    raw = nmf.build_dictionary(
        [("c", spec, events)], nmf_cfg=nmf.NmfConfig(template_floor=0.0))
    assert raw["band"][0].spectrum[40] > 0.0


def test_template_floor_monotone_support():
    rng = np.random.default_rng(31)
    hop = _hop()
    for _ in range(5):
        spec = rng.uniform(0.05, 0.3, (640, 64))
        lo = int(rng.integers(5, 50))
        spec[200:400, lo:lo + 8] += float(rng.uniform(0.5, 1.5))
        events = [Event("x", 200.5 * hop, 399.5 * hop)]
        sizes = []
        for floor in (0.0, 0.1, 0.3):
            d = nmf.build_dictionary(
                [("c", spec, events)],
                nmf_cfg=nmf.NmfConfig(iters=50, template_floor=floor))
            sizes.append(int((d["x"][0].spectrum > 0).sum()))
        assert sizes[0] >= sizes[1] >= sizes[2]
        assert sizes[2] >= 8  # the true band always survives


def test_nmf_config_validation():
    with pytest.raises(ValueError):
        nmf.NmfConfig(template_floor=1.0)
    with pytest.raises(ValueError):
        nmf.NmfConfig(template_floor=-0.1)
    with pytest.raises(ValueError):
        nmf.NmfConfig(background_quantile=1.5)
    nmf.NmfConfig(template_floor=0.0, background_quantile=0.0)  # both off is legal


# ------------------------------------------------------- decode_activations

def test_decode_activation_matches_known_support():
    rng = np.random.default_rng(14)
    s = rng.uniform(0.2, 1.0, 64)
    tpl = nmf.Template(spectrum=s / s.max(), label="x", source_clip="c")
    spec = np.full((640, 64), 1e-6 * s)
    spec[100:200] = s
    act = nmf.decode_activations(spec, [tpl], iters=100, seed=0)
    assert act.min() >= 0 and act.max() == pytest.approx(1.0)
    assert act[100:200].min() > 0.9
    assert np.delete(act, np.s_[100:200]).max() < 0.05


def test_decode_flat_input_gives_constant_activation():
    spec = np.full((640, 64), 1e-10)
    tpl = nmf.Template(spectrum=np.ones(64), label="x", source_clip="c")
    act = nmf.decode_activations(spec, [tpl], iters=50, seed=0)
    assert np.allclose(act, 1.0, atol=1e-6)


def test_decode_two_templates_cover_union_of_supports():
    rng = np.random.default_rng(15)
    s1 = np.zeros(64)
    s1[4:12] = rng.uniform(0.5, 1.0, 8)
    s2 = np.zeros(64)
    s2[40:48] = rng.uniform(0.5, 1.0, 8)
    spec = np.full((640, 64), 1e-7)
    spec[50:150] += s1
    spec[400:500] += s2
    tpls = [
        nmf.Template(s1 / s1.max(), "x", "c1"),
        nmf.Template(s2 / s2.max(), "x", "c2"),
    ]
    act = nmf.decode_activations(spec, tpls, iters=100, seed=0)
    # oracle: union of the two constructed supports
    inside = np.zeros(640, dtype=bool)
    inside[50:150] = True
    inside[400:500] = True
    assert act[inside].min() > 0.5
    assert act[~inside].max() < 0.1


def test_decode_does_not_modify_templates():
    rng = np.random.default_rng(16)
    s = rng.uniform(0.1, 1.0, 64)
    tpl = nmf.Template(spectrum=s.copy(), label="x", source_clip="c")
    spec = rng.uniform(0, 1, (100, 64))
    nmf.decode_activations(spec, [tpl], iters=20, seed=0)
    assert np.array_equal(tpl.spectrum, s)


# ------------------------------------------------------------ serialization

def test_dictionary_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    entries = {
        "noise": [
            nmf.Template(rng.uniform(0, 1, 64), "noise", "clip0"),
            nmf.Template(rng.uniform(0, 1, 64), "noise", "clip1"),
        ],
        "tone": [nmf.Template(rng.uniform(0, 1, 64), "tone", "clip2")],
    }
    nmf.save_dictionary(entries, tmp_path / "dict")
    loaded = nmf.load_dictionary(tmp_path / "dict")
    assert set(loaded) == {"noise", "tone"}
    for label in entries:
        assert len(loaded[label]) == len(entries[label])
        for a, b in zip(entries[label], loaded[label]):
            assert np.array_equal(a.spectrum, b.spectrum)
            assert a.source_clip == b.source_clip


def test_save_dictionary_rejects_pathy_labels(tmp_path):
    entries = {"a/b": [nmf.Template(np.ones(4), "a/b", "c")]}
    with pytest.raises(ValueError, match="file name"):
        nmf.save_dictionary(entries, tmp_path / "dict")
