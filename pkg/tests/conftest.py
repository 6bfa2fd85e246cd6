import pytest

from tightcascade.data import SyntheticTaskSpec, gen_corpus
from tightcascade.models import build_cascade, new_asr, new_mt
from tightcascade.nn import DecoderConfig, EncoderConfig


def tiny_task(**kw):
    base = dict(vocab_size=10, feature_dim=4, frames_per_token=(2, 3), noise_sigma=0.3, min_len=2, max_len=5, seed=3)
    base.update(kw)
    return SyntheticTaskSpec(**base)


def tiny_models(spec, seed=0):
    enc = EncoderConfig(num_layers=2, hidden=5, pool_factors=[2], embed_dim=4)
    dec = DecoderConfig(hidden=5, embed_dim=4, attention_dim=6)
    asr = new_asr(spec.source_vocab(), spec.feature_dim, enc, dec, seed=seed)
    mt = new_mt(spec.source_vocab(), spec.target_vocab(), EncoderConfig(num_layers=1, hidden=5, pool_factors=[], embed_dim=4), dec, seed=seed + 1)
    return asr, mt


@pytest.fixture(scope="session")
def task():
    return tiny_task()


@pytest.fixture(scope="session")
def corpus(task):
    return [c.to_example() for c in gen_corpus(task, 12)]


@pytest.fixture
def models(task):
    return tiny_models(task)


@pytest.fixture
def cascade(models):
    return build_cascade(*models)


# ---------------------------------------------------------------------------
# acceptance reporting: tests marked @pytest.mark.criterion(n, title) get one
# PASS/FAIL line each in the terminal summary, with any recorded measurements.

_CRITERIA: dict[int, dict] = {}


def _entry(n, title):
    return _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _entry(*marker.args)
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False


@pytest.fixture
def measure(request):
    """Attach a measurement to the calling test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        _entry(*marker.args)["notes"].append(str(text))

    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {e['title']}{notes}")
