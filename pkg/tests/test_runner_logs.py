"""Produtor de lotes em thread, sessão de log, telemetria e arquivo de progresso."""

from __future__ import annotations

import threading

import numpy as np
import pytest

from app.log_manager import LogManager
from app.main import run
from app.runner import BatchPrefetcher
from data import telemetry
from data.progress_manager import ProgressManager
from data.runtime_log import log_event
from engine.train import synchronous_batches


@pytest.fixture
def telemetry_file(tmp_path):
    previous = telemetry.destination()
    path = telemetry.set_destination(tmp_path / "telemetry.jsonl")
    yield path
    telemetry.set_destination(previous)


def test_prefetcher_matches_synchronous_order():
    make = lambda step: {"step": step, "square": step * step}  # noqa: E731
    steps = range(1, 30)
    threaded = list(BatchPrefetcher(depth=3)(make, steps))
    assert threaded == list(synchronous_batches(make, steps))


def test_prefetcher_propagates_producer_errors():
    def make(step):
        if step == 4:
            raise ValueError("lote quebrado")
        return step

    seen = []
    with pytest.raises(ValueError, match="lote quebrado"):
        for step, _ in BatchPrefetcher(depth=2)(make, range(1, 10)):
            seen.append(step)
    assert seen == [1, 2, 3]


def test_prefetcher_stops_when_consumer_leaves_early():
    produced = []
    lock = threading.Lock()

    def make(step):
        with lock:
            produced.append(step)
        return step

    prefetcher = BatchPrefetcher(depth=2)
    batches = prefetcher(make, range(1, 1000))
    for step, _ in batches:
        if step == 3:
            break
    batches.close()
    assert not prefetcher.running
    assert len(produced) < 1000


def test_log_session_writes_emitted_lines(tmp_path, monkeypatch):
    monkeypatch.delenv("DESKSEG_LOG_LEVEL", raising=False)
    manager = LogManager(logs_dir=tmp_path, flush_interval=0.05)
    path = manager.start_session("pré treino")
    assert path is not None
    assert path.name.endswith("-pre-treino.log")
    log_event("passo 1 concluído")
    log_event("detalhe interno", level="debug")
    manager.end_session()
    log_event("fora da sessão")
    manager.shutdown()

    text = path.read_text(encoding="utf-8")
    assert text.startswith("### Log de execução - pré treino ###")
    assert "[DeskSeg][INFO]" in text and "passo 1 concluído" in text
    assert "detalhe interno" not in text
    assert "fora da sessão" not in text


def test_log_session_counts_lines_it_could_not_queue(tmp_path, monkeypatch):
    monkeypatch.delenv("DESKSEG_LOG_LEVEL", raising=False)
    manager = LogManager(logs_dir=tmp_path, max_queue_size=1, flush_interval=0.05)
    manager.shutdown()
    assert manager.start_session("sem escritor") is not None
    log_event("primeira")
    log_event("segunda")
    manager.end_session()
    assert manager.dropped_lines == 2
    assert len(manager.failures) == 1
    assert "descartadas" in manager.failures[0]
    assert not manager.write_failed


def test_log_session_reports_unwritable_directory(tmp_path):
    blocker = tmp_path / "arquivo"
    blocker.write_text("x", encoding="utf-8")
    manager = LogManager(logs_dir=blocker / "logs", flush_interval=0.05)
    try:
        assert manager.start_session("eval") is None
        assert manager.write_failed
        assert manager.failures and "diretório de log" in manager.failures[0]
        log_event("sem arquivo")
        assert manager.dropped_lines == 0
    finally:
        manager.shutdown()


def test_cli_warns_when_the_session_log_fails(tmp_path, capsys):
    blocker = tmp_path / "arquivo"
    blocker.write_text("x", encoding="utf-8")
    manager = LogManager(logs_dir=blocker / "logs", flush_interval=0.05)
    try:
        assert run(["pretrain", "--config", str(tmp_path / "nada.json")], log_manager=manager) == 2
    finally:
        manager.shutdown()
    assert "Não foi possível preparar o diretório de log" in capsys.readouterr().out


def test_telemetry_records_plain_json(telemetry_file):
    telemetry.record_event("evaluation", {"mIoU": np.float64(0.5), "path": telemetry_file, "ids": np.arange(3)})
    events = telemetry.read_events()
    assert len(events) == 1
    assert events[0]["event"] == "evaluation"
    assert events[0]["details"] == {"mIoU": 0.5, "path": telemetry_file.as_posix(), "ids": [0, 1, 2]}


def test_telemetry_can_be_disabled(telemetry_file, monkeypatch):
    monkeypatch.setenv("DESKSEG_TELEMETRY_DISABLED", "1")
    entry = telemetry.record_event("step", {"step": 1})
    assert entry["event"] == "step"
    assert not telemetry_file.exists()


def test_progress_follows_stage_events(tmp_path, monkeypatch):
    monkeypatch.delenv("DESKSEG_PROGRESS_FILE", raising=False)
    progress = ProgressManager(out_dir=tmp_path)
    progress.handle_event("stage_started", {"stage": "pretrain", "steps": 10})
    progress.handle_event("step", {"step": 5, "train_loss": 1.25})
    progress.handle_event("evaluation", {"step": 5, "best_miou": 0.4})

    data = ProgressManager.read_progress(out_dir=tmp_path)
    assert data["status"] == "running"
    assert data["percentage"] == 50
    assert data["train_loss"] == 1.25
    assert data["best_miou"] == 0.4

    progress.handle_event("early_stop", {"stage": "pretrain", "step": 8, "best_step": 5})
    progress.handle_event("checkpoint_saved", {"stage": "pretrain", "path": "runs/pretrain.dsck"})
    messages = [item["message"] for item in ProgressManager.read_progress(out_dir=tmp_path)["messages"]]
    assert "Parada antecipada no passo 8 (melhor: passo 5)." in messages
    assert messages[-1] == "Checkpoint salvo em runs/pretrain.dsck."

    progress.handle_event("stage_finished", {"stage": "pretrain", "step": 10})
    assert ProgressManager.read_progress(out_dir=tmp_path)["status"] == "completed"

    progress.handle_event("divergence", {"step": 7})
    data = ProgressManager.read_progress(out_dir=tmp_path)
    assert data["status"] == "error"
    assert data["errors"][-1]["details"] == "passo 7"

    ProgressManager.reset(out_dir=tmp_path)
    assert ProgressManager.read_progress(out_dir=tmp_path) is None
