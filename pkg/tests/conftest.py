import pytest

from dust.harness.config import ExperimentConfig

TINY = {
    "model": {"d_model": 8, "n_heads": 2, "n_mmdit": 2, "n_dit": 1, "mlp_ratio": 2},
    "world": {"d_ctx": 8, "horizon": 8},
    "train": {"steps": 6, "batch_size": 8, "data_episodes": 6, "eval_episodes": 6},
}


def tiny_config(**sections) -> ExperimentConfig:
    d = {k: dict(v) for k, v in TINY.items()}
    for name, upd in sections.items():
        d.setdefault(name, {}).update(upd)
    return ExperimentConfig.from_dict(d)


@pytest.fixture
def tiny():
    return tiny_config


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    def emit(key: str, ok: bool, detail: str):
        line = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
