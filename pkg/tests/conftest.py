import numpy as np
import pytest

from chainveil.trace import DeviceProfile, synth_trace


@pytest.fixture
def two_disjoint_profiles():
    """Two devices whose gap signatures cannot be confused (0.2s vs 90s)."""
    return [
        DeviceProfile("fast_sensor", (0.2,), 0.0),
        DeviceProfile("slow_printer", (90.0,), 0.0),
    ]


@pytest.fixture
def small_trace(two_disjoint_profiles):
    return synth_trace(two_disjoint_profiles, 2000.0, 11)


def random_profiles(rng: np.random.Generator, n_devices: int) -> list[DeviceProfile]:
    """Small random device population for fuzzing."""
    profiles = []
    for d in range(n_devices):
        cycle_len = int(rng.integers(1, 4))
        cycle = tuple(float(x) for x in 10 ** rng.uniform(-0.7, 1.6, cycle_len))
        bursts = ()
        if rng.random() < 0.2:
            bursts = (int(rng.integers(1, 5)),)
        profiles.append(
            DeviceProfile(f"dev{d}", cycle, float(rng.uniform(0.0, 0.1)), bursts)
        )
    return profiles
