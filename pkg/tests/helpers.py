"""Shared builders for service-level tests."""

import threading
from contextlib import contextmanager

import numpy as np

from midpoint.dataset import SyntheticConfig, generate_synthetic
from midpoint.factorization import AnalystModel, ExtendedItemProfile
from midpoint.wire import SelectionConfig, make_analyst_server


def truth_model(n_users=50, n_items=12, d=3, sigma=0.0, seed=0, p_plus=None, p_minus=None):
    """Analyst model holding the generator's true profiles, plus the dataset and truth."""
    cfg = SyntheticConfig(n_users=n_users, n_items=n_items, d=d, noise_sigma=sigma, paired=True)
    ds, truth = generate_synthetic(cfg, seed)
    catalog = tuple(
        ExtendedItemProfile(i, float(truth.item_bias[k]), truth.item_latent[k]) for k, i in enumerate(truth.item_ids)
    )
    pp = np.full(n_items, 0.7) if p_plus is None else np.asarray(p_plus, dtype=float)
    pm = np.full(n_items, 0.7) if p_minus is None else np.asarray(p_minus, dtype=float)
    return AnalystModel(catalog, pp, pm, max(sigma, 1e-3)), ds, truth


@contextmanager
def running_server(model, config=SelectionConfig()):
    server = make_analyst_server(model, config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
