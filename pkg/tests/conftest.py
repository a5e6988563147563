"""Shared fixtures: trained reference models are expensive, build them once."""

import numpy as np
import pytest

from ringmpc import dealer, models, protocol, transport
from ringmpc.protocol import ProtocolSession
from ringmpc.ring import FixedPointConfig

CNN_SEED = 11
MLP_SEED = 11


@pytest.fixture(scope="session")
def cnn_bundle():
    model, train_set, val_set = models.reference_model("cnn", seed=CNN_SEED)
    return model, train_set, val_set


@pytest.fixture(scope="session")
def mlp_bundle():
    model, train_set, val_set = models.reference_model("mlp", seed=MLP_SEED)
    return model, train_set, val_set


def make_sessions(
    bool_width: int = 0,
    bool_count: int = 0,
    arith_width: int = 0,
    arith_count: int = 0,
    seed: int = 0,
    fxp: FixedPointConfig | None = None,
):
    """Two in-process sessions stocked with the requested triples."""
    ep0, ep1 = transport.local_pair()
    batches = []
    if bool_count:
        batches.append(dealer.gen_bool_triples(bool_count, bool_width, seed=seed * 2 + 1))
    if arith_count:
        batches.append(dealer.gen_arith_triples(arith_count, arith_width, seed=seed * 2 + 2))
    sessions = []
    for party, ep in ((0, ep0), (1, ep1)):
        store = dealer.TripleStore(party)
        for batch in batches:
            store.add_batch(batch)
        sessions.append(ProtocolSession(ep, store, fxp or FixedPointConfig()))
    return sessions[0], sessions[1], (ep0, ep1)


def stocked_sessions_for_relu(count: int, window_width: int, ring_width: int, seed: int = 0,
                              fxp: FixedPointConfig | None = None):
    """Sessions with exactly the triples one windowed ReLU over `count` needs."""
    need = protocol.relu_triple_cost(count, window_width, ring_width)
    return make_sessions(
        bool_width=window_width,
        bool_count=need[(dealer.BOOL, window_width)],
        arith_width=ring_width,
        arith_count=need[(dealer.ARITH, ring_width)],
        seed=seed,
        fxp=fxp,
    )


def random_residue_array(rng: np.random.Generator, n: int, width: int) -> np.ndarray:
    return np.frombuffer(rng.bytes(8 * n), dtype="<u8").copy() & np.uint64((1 << width) - 1)
