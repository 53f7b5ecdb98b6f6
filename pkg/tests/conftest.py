import numpy as np
import pytest


def am_complex(seed: int, fs: int = 8000, seconds: float = 2.0, f0: float | None = None) -> np.ndarray:
    """Amplitude-modulated harmonic complex: a cheap speech-like test signal."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(fs * seconds)) / fs
    f0 = f0 or rng.uniform(100, 220)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 2 * np.pi))
    ks = np.arange(1, 12)
    ks = ks[ks * f0 < 0.45 * fs]
    carrier = np.sum(np.sin(2 * np.pi * f0 * ks[:, None] * t + rng.uniform(0, 2 * np.pi, (ks.size, 1)))
                     / ks[:, None], axis=0)
    return env * carrier


def add_noise(x: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    n = np.random.default_rng(seed).standard_normal(x.size)
    n *= np.sqrt(np.mean(x ** 2) / np.mean(n ** 2)) * 10 ** (-snr_db / 20)
    return x + n


@pytest.fixture
def speechlike():
    return am_complex(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
