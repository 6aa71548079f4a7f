"""Shared fixtures: a minimal in-memory network handle for protocol tests."""

import numpy as np
import pytest

from wdmqkd.photonics import DetectorModel, SourceModel, p_dark_per_gate
from wdmqkd.protocol import LinkParameters, generate_train, measure_train
from wdmqkd.router import build_assignment


class FakeNetwork:
    """Smallest handle satisfying the run_session contract.

    Quantum transmission is modeled directly with the photonics gate
    simulation; there is no event log and no loss geometry, just fixed
    per-link click probabilities.
    """

    def __init__(
        self,
        n_ports=4,
        seed=0,
        p_sig=0.05,
        p_dark=0.0,
        e_opt=0.0,
        rep_rate_hz=1.0e6,
    ):
        self.n_ports = n_ports
        self.assignment = build_assignment(n_ports)
        self.p_sig = p_sig
        self.p_dark = p_dark
        self.e_opt = e_opt
        self.src = SourceModel(rep_rate_hz=rep_rate_hz, e_opt=e_opt)
        self.det = DetectorModel(
            dark_rate_hz=p_dark * rep_rate_hz, rep_rate_hz=rep_rate_hz
        )
        self._seed = seed
        self._protocol_rng = np.random.default_rng(
            np.random.SeedSequence((seed, 0xFACE))
        )
        self._time = 0

    def port_label(self, port):
        return self.assignment.port(port).label

    def link_parameters(self, server, client):
        return LinkParameters(
            channel=self.assignment.pair_channel(server, client),
            p_sig=self.p_sig,
            p_dark=self.p_dark,
            e_opt=self.e_opt,
            rep_rate_hz=self.src.rep_rate_hz,
            total_loss_db=0.0,
        )

    def transmit_train(self, server, client, n_frames):
        channel = self.assignment.pair_channel(server, client)
        rng = np.random.default_rng(
            np.random.SeedSequence((self._seed, server, client))
        )
        train = generate_train(n_frames, channel, self.src, rng)
        detections = measure_train(train, self.det, self.p_sig, self.e_opt, rng)
        return train, detections

    def protocol_rng(self):
        return self._protocol_rng

    def clock_ns(self):
        self._time += 10
        return self._time


@pytest.fixture
def fake_network():
    return FakeNetwork
