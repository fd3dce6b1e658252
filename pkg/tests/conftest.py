from __future__ import annotations

import sys
import warnings

import numpy as np
import pytest
import torch
from torch.func import functional_call, vmap

from trograph import se3, synthdata
from trograph.denoiser import DTYPE, graph_arrays, loss
from trograph.kinematics import JointLimitWarning, forward_kinematics, parse_urdf

CHAIN3_URDF = """<?xml version="1.0"?>
<robot name="chain3">
  <link name="base"/>
  <link name="link1"/>
  <link name="link2"/>
  <joint name="j1" type="revolute">
    <parent link="base"/>
    <child link="link1"/>
    <origin xyz="1 0 0" rpy="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5707963267948966" upper="1.5707963267948966"/>
  </joint>
  <joint name="j2" type="revolute">
    <parent link="link1"/>
    <child link="link2"/>
    <origin xyz="1 0 0" rpy="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5707963267948966" upper="1.5707963267948966"/>
  </joint>
</robot>
"""

FIXED_URDF = """<robot name="fixed2">
  <link name="a"/>
  <link name="b"/>
  <joint name="weld" type="fixed">
    <parent link="a"/>
    <child link="b"/>
    <origin xyz="0.1 0.2 0.3" rpy="0.1 0.2 0.3"/>
  </joint>
</robot>
"""


@pytest.fixture(scope="session")
def chain3_hand():
    return parse_urdf(CHAIN3_URDF)


@pytest.fixture(scope="session")
def two_finger():
    return synthdata.make_hand("two_finger")


@pytest.fixture(scope="session")
def three_finger():
    return synthdata.make_hand("three_finger")


@pytest.fixture(scope="session")
def synth_chain3():
    return synthdata.make_hand("chain3")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng, max_angle=np.pi * 0.95):
    from trograph import se3

    v = rng.normal(size=3)
    return se3.so3_exp(v / np.linalg.norm(v) * rng.uniform(0, max_angle))


def random_transform(rng, max_angle=np.pi * 0.95):
    from trograph import se3

    return se3.make_transform(random_rotation(rng, max_angle), rng.normal(size=3))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0.0 else float(np.linalg.norm(a - b) / den)


def random_graph(seed: int, P: int = 5, L_pad: int = 6, L: int = 4, pose_scale: float = 1.0):
    """Small graph with random nodes; rotation parts kept below pi."""
    from trograph.pointcloud import ObjectNodeSet
    from trograph.trograph import GEOM_EMBED_DIM, LinkNodeSet, TroGraph

    rng = np.random.default_rng(seed)
    obj = ObjectNodeSet(rng.normal(size=(P, 3)), float(rng.uniform(0.5, 2)), rng.normal(size=(P, 64)))
    mask = np.arange(L_pad) < L
    poses = rng.normal(size=(L_pad, 6)) * pose_scale * np.array([1, 1, 1, 0.8, 0.8, 0.8])
    theta = np.linalg.norm(poses[:, 3:], axis=1, keepdims=True)
    poses[:, 3:] *= np.minimum(1.0, 2.5 / np.maximum(theta, 1e-300))

    def pad(a):
        return np.where(mask.reshape((-1,) + (1,) * (a.ndim - 1)), a, 0.0)

    links = LinkNodeSet(
        pad(poses),
        pad(rng.normal(size=(L_pad, GEOM_EMBED_DIM))),
        pad(rng.normal(size=(L_pad, 3)) * 0.1),
        pad(rng.uniform(0.1, 1, L_pad)),
        mask,
    )
    return TroGraph(obj, links, {"hand_name": "h", "P": P, "L_pad": L_pad, "seed": seed})


def fd_grad(fn, psi, rows, h=1e-6):
    g = np.zeros_like(psi)
    for r in rows:
        for c in range(6):
            d = np.zeros_like(psi)
            d[r, c] = h
            g[r, c] = (fn(psi + d) - fn(psi - d)) / (2 * h)
    return g


def fd_jacobian(hand, q, h=1e-6):
    """Central differences of FK: translation columns and the rotation log increment."""
    L = hand.L
    J = np.zeros((L, 6, hand.dof))
    for k in range(hand.dof):
        dq = np.zeros(hand.dof)
        dq[k] = h
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", JointLimitWarning)
            Tp, Tm = forward_kinematics(hand, q + dq), forward_kinematics(hand, q - dq)
        J[:, :3, k] = (Tp[:, :3, 3] - Tm[:, :3, 3]) / (2 * h)
        for i in range(L):
            dR = Tp[i, :3, :3] @ Tm[i, :3, :3].T
            J[i, 3:, k] = se3.so3_log(dR) / (2 * h)
    return J


def param_fd(model, graph, t, eps, h=1e-5, chunk=512):
    """Central differences of the loss for every parameter entry, batched with vmap."""
    arrays = graph_arrays([graph], [t])
    eps_t = torch.as_tensor(eps[None], dtype=DTYPE)
    mask = arrays["mask"].to(DTYPE)
    params = {k: v.detach() for k, v in model.net.named_parameters()}

    out = {}
    for name, p in params.items():
        def shifted(delta, name=name, p=p):
            pred = functional_call(model.net, {**params, name: p + delta}, kwargs=arrays)
            return loss(eps_t, pred, mask=mask)

        n = p.numel()
        g = np.zeros(n)
        for lo in range(0, n, chunk):
            idx = torch.arange(lo, min(n, lo + chunk))
            basis = torch.zeros(len(idx), n, dtype=DTYPE)
            basis[torch.arange(len(idx)), idx] = h
            basis = basis.reshape(len(idx), *p.shape)
            g[lo : lo + len(idx)] = ((vmap(shifted)(basis) - vmap(shifted)(-basis)) / (2 * h)).numpy()
        out[name] = g.reshape(tuple(p.shape))
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
