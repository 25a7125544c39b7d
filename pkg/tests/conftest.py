"""Shared fixtures: the desk-scale instance and its trained models.

Training is the expensive step, so one session-scoped fixture trains the
learnable-weights model and the fixed-weights ablation once; the acceptance
criteria and the training-progress check all read from it.
"""

import dataclasses
import time

import numpy as np
import pytest

from extvae import fieldsim as fs
from extvae import model as mdl
from extvae import training as tr

DESK_SEED = 2026
DESK_EPOCHS = 3000
DESK_RHO0 = 0.1


@pytest.fixture(scope="session")
def desk_instance():
    """The 20x20 / 16-knot / 200-step synthetic instance."""
    grid = fs.regular_grid(20, 20, 20.0)
    knots = fs.knot_lattice(4, 20.0)
    w_true = fs.wendland_basis(grid.sites, knots, 6.0)
    c = fs.smooth_condition(fs.synthetic_condition(200, DESK_SEED))
    theta_true = fs.simulate_theta(c, knots)
    x = fs.simulate_dataset(theta_true, w_true, 30.0, DESK_SEED)
    return {
        "grid": grid, "knots": knots, "w_true": w_true,
        "c": c, "theta_true": theta_true, "x": x, "seed": DESK_SEED,
        "spacing": 20.0 / 3.0,
    }


@pytest.fixture(scope="session")
def desk_models(desk_instance):
    """Learnable-W and fixed-W fits of the desk instance, with timings."""
    inst = desk_instance
    hyper = mdl.HyperParams(latent_dim=16, n_theta_basis=9, seed=DESK_SEED,
                            rho0=DESK_RHO0, penalty_abs=True,
                            epochs=DESK_EPOCHS)
    t0 = time.perf_counter()
    model, report = tr.train(inst["x"], inst["c"], tr.TrainConfig(hyper=hyper),
                             knots=inst["knots"], sites=inst["grid"].sites,
                             wendland_radius=6.0)
    t_learn = time.perf_counter() - t0
    t0 = time.perf_counter()
    fixed_hyper = dataclasses.replace(hyper, fix_w=True)
    model_fx, report_fx = tr.train(inst["x"], inst["c"],
                                   tr.TrainConfig(hyper=fixed_hyper),
                                   knots=inst["knots"],
                                   sites=inst["grid"].sites,
                                   wendland_radius=6.0)
    t_fixed = time.perf_counter() - t0
    return {
        "model": model, "report": report, "seconds": t_learn,
        "model_fixed": model_fx, "report_fixed": report_fx,
        "seconds_fixed": t_fixed,
    }


@pytest.fixture(scope="session")
def desk_holdout(desk_instance):
    from extvae.seeds import substream

    rng = substream(DESK_SEED, "holdout")
    return np.sort(rng.choice(desk_instance["grid"].n_sites, size=40,
                              replace=False))
