from unittest.mock import MagicMock, patch

import pytest
from fastapi.testclient import TestClient

from apps.decoding.schemas import BeamConfig
from apps.serving.service import translation_service
from core.exceptions import ContextError
from manage import app, main


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def loaded_run():
    run = MagicMock()
    run.beam = BeamConfig(beam=4, alpha=0.6)
    run.translate.return_value = [("b", "a")]
    with patch.object(translation_service, "_run", run):
        yield run


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    data = response.json()
    assert "name" in data
    assert "version" in data
    assert data["status"] == "running"


def test_health_check(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "run_loaded": False}


class TestTranslateRoute:
    def test_no_run_loaded(self, client):
        response = client.post("/api/v1/translate", json={"sentences": ["a b"]})
        assert response.status_code == 503

    def test_translates_with_run_defaults(self, client, loaded_run):
        response = client.post("/api/v1/translate", json={"sentences": ["a b"], "corpus": "ind"})
        assert response.status_code == 200
        data = response.json()
        assert data["translations"] == ["b a"]
        assert data["beam"] == 4
        assert data["alpha"] == pytest.approx(0.6)
        sentences, corpus = loaded_run.translate.call_args.args
        assert sentences == [["a", "b"]]
        assert corpus == "ind"

    def test_beam_override(self, client, loaded_run):
        response = client.post("/api/v1/translate", json={"sentences": ["a b"], "beam": 1})
        assert response.json()["beam"] == 1
        assert loaded_run.translate.call_args.kwargs["beam"].beam == 1

    def test_missing_context(self, client, loaded_run):
        loaded_run.translate.side_effect = ContextError("pass a corpus")
        response = client.post("/api/v1/translate", json={"sentences": ["a b"]})
        assert response.status_code == 400
        assert response.json()["detail"] == "context error: pass a corpus"

    def test_empty_request(self, client, loaded_run):
        response = client.post("/api/v1/translate", json={"sentences": []})
        assert response.status_code == 422


class TestEvaluateRoute:
    def test_identical(self, client):
        response = client.post("/api/v1/evaluate", json={"hypotheses": ["a b c d"], "references": ["a b c d"]})
        assert response.status_code == 200
        assert response.json() == {"bleu": 100.0, "formatted": "BLEU = 100.00"}

    def test_line_mismatch(self, client):
        response = client.post("/api/v1/evaluate", json={"hypotheses": ["a", "b"], "references": ["a"]})
        assert response.status_code == 400


class TestCommandLine:
    def test_missing_config(self, tmp_path, capsys):
        assert main(["prepare", "--config", str(tmp_path / "missing.ini")]) == 2
        assert capsys.readouterr().err.startswith("config error:")

    def test_evaluate(self, tmp_path, capsys):
        (tmp_path / "hyp").write_text("a b c d\n", encoding="utf-8")
        (tmp_path / "ref").write_text("a b c d\n", encoding="utf-8")
        assert main(["evaluate", str(tmp_path / "hyp"), str(tmp_path / "ref")]) == 0
        assert capsys.readouterr().out.strip() == "BLEU = 100.00"

    def test_evaluate_missing_file(self, tmp_path, capsys):
        assert main(["evaluate", str(tmp_path / "hyp"), str(tmp_path / "ref")]) == 3
        assert capsys.readouterr().err.startswith("data error:")

    def test_report_of_non_run(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 3

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["fly"])
