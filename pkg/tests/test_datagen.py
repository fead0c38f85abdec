import math

import numpy as np
import pytest

from fedprog.baseline import central_mfpca
from fedprog.datagen import ResampleError, SimConfig, generate_study, generate_system, preset
from fedprog.scores import fve_select


def test_noiseless_length_and_ttf():
    cfg = SimConfig(obs_noise=0.0)
    s, ttf = generate_system(1.0, cfg, 0, ttf_noise=0.0)
    assert ttf == pytest.approx(math.exp(-0.5))
    assert s.observed.size == 404 == math.floor(math.exp(-0.5) / 0.0015)


def test_path_value_at_inverse_e():
    cfg = SimConfig(obs_noise=0.0)
    s, _ = generate_system(1.0, cfg, 0, ttf_noise=0.0)
    k = int(round(math.exp(-1) / cfg.step))
    tau = k * cfg.step
    assert s.values[k] == pytest.approx(-1 / math.log(tau), rel=1e-12)
    assert s.values[k] == pytest.approx(1.0, abs=5e-3)


def test_same_seed_same_output():
    cfg = SimConfig()
    a, ta = generate_system(0.8, cfg, 3)
    b, tb = generate_system(0.8, cfg, 3)
    np.testing.assert_array_equal(a.values, b.values)
    assert ta == tb


def test_resample_conditions():
    with pytest.raises(ResampleError):
        generate_system(-0.1, SimConfig(), 0)
    with pytest.raises(ResampleError):
        generate_system(0.001, SimConfig(), 0, ttf_noise=0.1)


def test_noise_reading():
    assert SimConfig().obs_noise_sd == pytest.approx(math.sqrt(0.2))
    assert SimConfig(noise_is_variance=False).obs_noise_sd == 0.2


def test_presets():
    c = preset("sim1")
    assert c.user_split == (54, 27, 9) and c.n_test == 30 and c.n_systems == 120
    c = preset("stragglers")
    assert c.user_split == (33, 70, 55, 56, 67) and c.n_test == 30
    c = preset("scale")
    assert len(c.user_split) == 150 and min(c.user_split) >= 1 and max(c.user_split) <= 20
    assert preset("scale").user_split == preset("scale", seed=0).user_split
    with pytest.raises(ValueError):
        preset("nope")


def test_study_layout_and_permutation():
    st = generate_study(preset("sim1"))
    assert [len(d) for d in st.participants] == [54, 27, 9] and len(st.test) == 30
    ids = [s.system_id for d in st.participants + [st.test] for s in d.signals]
    assert len(set(ids)) == 120
    st2 = generate_study(preset("sim1", permutation=4))
    ids2 = sorted(s.system_id for d in st2.participants + [st2.test] for s in d.signals)
    assert ids2 == sorted(ids)
    assert [s.system_id for s in st2.test.signals] != [s.system_id for s in st.test.signals]
    m = st.participants[0].signals[0]
    assert m.observed.size > 0 and np.isnan(m.values[0])


def test_noiseless_spectrum_decays():
    cfg = SimConfig(user_split=(100,), n_test=0, obs_noise=0.0, missing_fraction=0.0, seed=5)
    st = generate_study(cfg)
    sigs = st.participants[0].signals
    L = min(s.observed.size for s in sigs)
    X = np.column_stack([s.values[1: L + 1] for s in sigs])
    f = central_mfpca(X, 1)
    assert fve_select(f.singular_values, 0.95) == 1
