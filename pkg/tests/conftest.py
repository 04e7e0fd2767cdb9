import pytest
import torch

from ddr.encoder import EncoderConfig, TokenSequence, init_backbone
from ddr.rem import RemConfig, init_rem, insert_rem

torch.set_num_threads(1)

TOY = EncoderConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=12, vocab_size=30, max_len=10)


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def toy_backbone():
    return init_backbone(TOY, seed=3)


def random_seq(gen: torch.Generator, cfg: EncoderConfig, min_len: int = 1) -> TokenSequence:
    n = int(torch.randint(min_len, cfg.max_len + 1, (1,), generator=gen))
    ids = torch.randint(0, cfg.vocab_size, (n,), generator=gen).tolist()
    return TokenSequence(tuple(ids))


def perturbed_rem(cfg: EncoderConfig, seed: int, rank: int = 2, bottleneck: int = 3, scale: float = 0.3):
    """A REM whose zero-initialised halves were filled with random values."""
    rem = init_rem(RemConfig.for_encoder(cfg, lora_rank=rank, pa_bottleneck=bottleneck), seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    for name in rem.params.names():
        if name.endswith(".b") or name.endswith(".up"):
            shape = rem.params[name].shape
            rem.params[name] = torch.randn(shape, generator=gen) * scale
    return rem


def assembled(cfg: EncoderConfig, seed: int = 0):
    return insert_rem(init_backbone(cfg, seed=seed), perturbed_rem(cfg, seed + 100))


# ---------------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Per-test dict whose contents are echoed on the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    info: dict = {}
    if marker is not None:
        num, title = marker.args
        _CRITERIA[num] = {"title": title, "detail": info, "outcome": None}
    return info


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    entry = _CRITERIA.setdefault(num, {"title": title, "detail": {}, "outcome": None})
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        status = entry["outcome"] or "NOT RUN"
        extra = "; ".join(f"{k}={v}" for k, v in entry["detail"].items())
        terminalreporter.write_line(f"[{status}] criterion {num:2d}: {entry['title']}" + (f" ({extra})" if extra else ""))
