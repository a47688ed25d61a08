import numpy as np
import pytest

from shortcut_audit.data import ABSENT, PRESENT, ImageTensor, Item, LabeledDataset, write_png

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def acceptance_log():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool | None, detail: str = "") -> None:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        _ACCEPTANCE.append((name, status, detail))
        print(f"[acceptance] {name}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name}  {detail}")


def make_dataset(tmp_path, labels, size=24, seed=0, name="toy"):
    """Random RGB PNGs on disk, one per label, ids img000..."""
    rng = np.random.default_rng(seed)
    tmp_path.mkdir(parents=True, exist_ok=True)
    items = []
    for i, label in enumerate(labels):
        arr = rng.integers(0, 256, size=(3, size, size)).astype(np.float32) / 255
        path = tmp_path / f"img{i:03d}.png"
        write_png(ImageTensor(arr), path)
        items.append(Item(f"img{i:03d}", path, label))
    return LabeledDataset(tuple(items), name)


def id_dataset(n_absent, n_present, name="ids"):
    """Dataset of fake items (sources never read)."""
    items = [Item(f"a{i:05d}", f"a{i}.png", ABSENT) for i in range(n_absent)]
    items += [Item(f"p{i:05d}", f"p{i}.png", PRESENT) for i in range(n_present)]
    return LabeledDataset(tuple(items), name)
