import pytest
import torch
from torch.autograd.functional import jacobian

from pairvc.flows import CouplingLayer, SpeakerFlow


def _perturbed(channels=4, hidden=8, cond=3, mean_only=False, seed=0):
    flow = SpeakerFlow(channels, hidden, n_flows=3, kernel_size=3, n_layers=2, cond_dim=cond,
                       mean_only=mean_only).double()
    flow.perturb_(torch.Generator().manual_seed(seed), 0.5)
    return flow


def test_identity_at_init():
    flow = SpeakerFlow(4, 8, n_flows=4, cond_dim=3)
    z = torch.randn(2, 4, 11)
    g = torch.randn(2, 3)
    z_p, logdet = flow(z, g)
    # an even number of flips restores channel order
    torch.testing.assert_close(z_p, z)
    assert torch.all(logdet == 0)
    torch.testing.assert_close(flow.inverse(z, g), z)


@pytest.mark.parametrize("mean_only", [False, True])
def test_inverse_round_trip(mean_only):
    flow = _perturbed(mean_only=mean_only).float()
    z = torch.randn(3, 4, 25)
    g = torch.randn(3, 3)
    z_p, logdet = flow(z, g)
    assert torch.isfinite(logdet).all()
    assert (flow.inverse(z_p, g) - z).abs().max() < 1e-4
    assert (flow(flow.inverse(z, g), g)[0] - z).abs().max() < 1e-4


def test_logdet_matches_autograd_jacobian():
    # independent oracle: log|det J| of the flattened map, built by autograd
    flow = _perturbed(seed=3)
    g = torch.randn(1, 3, dtype=torch.float64)
    z = torch.randn(1, 4, 6, dtype=torch.float64)
    _, logdet = flow(z, g)
    jac = jacobian(lambda v: flow(v.view(1, 4, 6), g)[0].reshape(-1), z.reshape(-1))
    sign, ref = torch.linalg.slogdet(jac)
    assert sign > 0
    assert float(logdet[0].detach()) == pytest.approx(float(ref), abs=1e-8)


def test_mean_only_is_volume_preserving():
    flow = _perturbed(mean_only=True)
    _, logdet = flow(torch.randn(2, 4, 9, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64))
    assert torch.all(logdet == 0)


def test_conditioning_changes_output():
    flow = _perturbed()
    z = torch.randn(1, 4, 8, dtype=torch.float64)
    a = flow(z, torch.randn(1, 3, dtype=torch.float64))[0]
    b = flow(z, torch.randn(1, 3, dtype=torch.float64))[0]
    assert (a - b).abs().max() > 0


def test_odd_channels_rejected():
    with pytest.raises(ValueError):
        CouplingLayer(3, 8)
