import sys

import numpy as np
import pytest

from vital.fingerprints import FingerprintDataset, FingerprintRecord, ReferencePoint
from vital.synthgen import BuildingSpec, GenConfig, default_base_profiles, default_extended_profiles, generate


def write_csv(path, rows, aps=("a", "b")):
    header = "building_id,rp_id,x_m,y_m,device_id,sample_idx," + ",".join("ap_" + a for a in aps)
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def toy_dataset(n_rps=3, devices=("d0", "d1"), samples=2, seed=0, building=0):
    """Small deterministic dataset: each RP has a distinct strong AP."""
    rng = np.random.default_rng(seed)
    aps = tuple(f"ap{k}" for k in range(n_rps + 1))
    rps = {(building, r): ReferencePoint(r, building, float(r), 0.0) for r in range(n_rps)}
    records = []
    for r in range(n_rps):
        for d in devices:
            readings = {
                aps[r]: np.clip(-40 + rng.normal(0, 1, samples), -100, 0),
                aps[-1]: np.clip(-80 + rng.normal(0, 1, samples), -100, 0),
            }
            records.append(FingerprintRecord(building, r, d, readings))
    return FingerprintDataset(tuple(records), rps, tuple(sorted(aps)), samples)


def tiny_gen_config(seed=0, buildings=2, path=8.0, aps=12, shadow=1.0):
    specs = [BuildingSpec(b, path_length=path + 2 * b, num_aps=aps, shadowing_sigma=shadow) for b in range(buildings)]
    return GenConfig(specs, default_base_profiles()[:3], default_extended_profiles()[:1],
                     samples_per_rp_per_device=3, seed=seed)


@pytest.fixture(scope="session")
def tiny_synth():
    return generate(tiny_gen_config())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
