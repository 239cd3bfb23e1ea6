"""Shared builders for small synthetic instances."""
import numpy as np

from nonergodic_eas.cells import CellGrid
from nonergodic_eas.geo import XY
from nonergodic_eas.ingest import ingest
from nonergodic_eas.model import HyperParams, ModelParams
from nonergodic_eas.validate import SyntheticSpec, generate_synthetic

SMALL_GRID = CellGrid(XY(350.0, 3750.0), 20.0, 20.0, 5, 4)


def small_spec(seed=0, **kw):
    """5 events, 10 stations, 20 cells."""
    base = dict(n_events=5, n_stations=10, grid=SMALL_GRID, freqs=(1.0, 8.0),
                c7=(-0.004, -0.007), p_record=0.8, r_max=500.0, n_clusters=1, seed=seed)
    base.update(kw)
    return SyntheticSpec(**base)


def small_data(seed=0, **kw):
    syn = generate_synthetic(small_spec(seed, **kw))
    data, _ = ingest(syn.flatfile, syn.c7, grid=syn.grid)
    return data, syn


def random_state(fd, rng):
    """A centred parameter state with c_ca strictly negative."""
    s = fd.sizes
    params = ModelParams(
        dc0=rng.normal(0, 0.1),
        dc0e=rng.normal(0, 0.2, 2),
        dc1e=rng.normal(0, 0.2, s["dc1e"]),
        dc1as=rng.normal(0, 0.3, s["dc1as"]),
        dc1bs=rng.normal(0, 0.4, s["dc1bs"]),
        c_ca=-np.exp(rng.normal(np.log(-fd.c7), 0.3, s["c_ca"])),
        dB=rng.normal(0, 0.4, s["dB"]),
        phi0=float(np.exp(rng.normal(-1.2, 0.2))),
        tau0=float(np.exp(rng.normal(-1.0, 0.2))),
    )
    hyper = HyperParams(*np.exp(rng.normal(
        [3.3, -2.3, 3.3, -1.5, -0.8, 3.8, np.log(-fd.c7) - 1, np.log(-fd.c7) - 1.5], 0.2)))
    return params, hyper

# acceptance verdict lines, echoed in the pytest terminal summary
ACCEPTANCE = []


def verdict(number, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok
