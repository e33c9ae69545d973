# std library
import io

# 3rd party
import numpy as np
import pytest

# own
import relureduce as rr


def test_ols_fit_on_cifar100_points():
    model = rr.fit_latency_model(rr.CIFAR100_RESNET18_POINTS)
    assert model.slope == pytest.approx(0.0192747, rel=1e-4)
    assert model.intercept == pytest.approx(0.181868, abs=1e-4)
    assert model.r_squared == pytest.approx(0.998, abs=1e-3)
    assert len(model) == 10


def test_relative_fit_tracks_every_point():
    model = rr.fit_latency_model(rr.CIFAR100_RESNET18_POINTS, weighting="relative")
    assert model.slope == pytest.approx(0.0208877, rel=1e-4)
    assert model.intercept == pytest.approx(0.0985276, rel=1e-3)
    for kilo, seconds in rr.CIFAR100_RESNET18_POINTS:
        assert float(model(kilo)) == pytest.approx(seconds, rel=0.25)


def test_default_model_against_tinyimagenet():
    model = rr.default_latency_model()
    assert model is rr.default_latency_model()
    assert model.weighting == "relative"
    measured = dict(rr.TINYIMAGENET_RESNET18_POINTS)
    for kilo in (917.52, 458.76, 114.69):
        assert float(model(kilo)) == pytest.approx(measured[kilo], rel=0.25)
    assert float(model(917.52)) == pytest.approx(19.26, abs=0.01)


def test_refit_on_tinyimagenet_points():
    model = rr.fit_latency_model(rr.TINYIMAGENET_RESNET18_POINTS)
    assert float(model(98.31)) == pytest.approx(2.64, rel=0.25)


def test_estimate_takes_raw_counts():
    model = rr.default_latency_model()
    assert rr.estimate_latency(model, 229_380) == pytest.approx(float(model(229.38)))
    assert rr.estimate_latency(model, 0) == pytest.approx(model.intercept)
    np.testing.assert_allclose(model([10, 20]), [model(10), model(20)])


def test_negative_intercept_refits_through_origin():
    model = rr.fit_latency_model([(1, 0.5), (2, 2.0), (3, 3.5)])
    assert model.intercept == 0
    assert model.slope == pytest.approx(15 / 14)
    assert model(0) == 0


def test_fit_validation():
    with pytest.raises(rr.ConfigError):
        rr.fit_latency_model([(1, 1)])
    with pytest.raises(rr.ConfigError):
        rr.fit_latency_model([(5, 1), (5, 2)])
    with pytest.raises(rr.ConfigError):
        rr.fit_latency_model(rr.CIFAR100_RESNET18_POINTS, weighting="huber")
    with pytest.raises(rr.ConfigError):
        rr.fit_latency_model([(1, 0.0), (2, 1.0)], weighting="relative")


def test_parameter_uncertainties():
    model = rr.fit_latency_model(rr.CIFAR100_RESNET18_POINTS)
    df = model.df
    assert df.index.tolist() == ["slope", "intercept"]
    assert (df["s"] > 0).all()
    estimate = model.predict_u(100.0)
    assert estimate.n == pytest.approx(float(model(100.0)))
    assert estimate.s > 0
    assert "R^2" in str(model)


def test_exact_line_has_no_uncertainty():
    model = rr.fit_latency_model([(0, 1.0), (10, 2.0), (20, 3.0)])
    assert model.slope == pytest.approx(0.1)
    assert model.intercept == pytest.approx(1.0)
    assert model.r_squared == pytest.approx(1.0)
    assert model.u == pytest.approx([0, 0], abs=1e-12)


def test_read_latency_points():
    text = "relus,latency_s\n229.38K,4.61\n7168,0.21\n"
    assert rr.read_latency_points(io.StringIO(text)) == [(pytest.approx(229.38), 4.61), (pytest.approx(7.168), 0.21)]
    with pytest.raises(rr.ConfigError):
        rr.read_latency_points(io.StringIO("relus,latency_s\n100,fast\n"))
