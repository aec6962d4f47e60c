"""The verification battery itself, plus the fault-injection contract: a
deliberately corrupted conv backward must be caught and named."""

import numpy as np
import pytest

import csunet.functional
from csunet.cli import main as cli_main
from csunet.gradcheck import grad_check
from csunet.tensor import Tensor


def test_grad_check_agrees_with_closed_form_gradient():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((4, 4)))

    def f(p):
        return (p * p * 0.5 + a * p).sum()  # gradient is p + a exactly

    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    r = grad_check(f, x, name="quadratic")
    assert r.passed
    assert r.max_rel_err < 1e-8


def test_grad_check_requires_float64_and_grad():
    x32 = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda p: (p * p).sum(), x32)
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        grad_check(lambda p: (p * p).sum(), x)


def test_grad_check_rejects_non_scalar_objective():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda p: p * 2.0, x)


def test_grad_check_restores_the_probed_point():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    before = x.data.copy()
    grad_check(lambda p: (p * p).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def _sign_flipped_conv(real_conv):
    """Same forward values, but the gradient leaving conv3d is negated."""

    def corrupted(*args, **kwargs):
        out = real_conv(*args, **kwargs)
        real_backward = out._backward
        if real_backward is None:
            return out

        def flipped(grad):
            real_backward(-grad)

        out._backward = flipped
        return out

    return corrupted


def test_injected_conv_backward_fault_is_caught_and_named(monkeypatch, capsys):
    monkeypatch.setattr(csunet.functional, "conv3d", _sign_flipped_conv(csunet.functional.conv3d))
    rc = cli_main(["gradcheck"])
    lines = capsys.readouterr().out.splitlines()
    assert rc == 1
    failing = [ln for ln in lines if ln.startswith("FAIL")]
    assert failing, "corruption must surface as failures"
    assert any("conv" in ln for ln in failing), f"conv not named in: {failing[:3]}"


def test_gradcheck_cli_reports_every_item_once(capsys):
    rc = cli_main(["gradcheck"])
    out = capsys.readouterr().out
    assert rc == 0
    item_lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    names = [ln.split()[1] for ln in item_lines]
    assert len(names) == len(set(names)), "every checked item appears exactly once"
    assert all(ln.startswith("PASS") for ln in item_lines)
    for needle in ("conv3d/input", "maxpool3d/input", "softmax_channels", "squeeze_excite/input",
                   "mini_u_depth2/input", "gated_skip_mini_u/input", "network/input"):
        assert needle in names
