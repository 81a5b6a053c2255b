import pytest

from posbridge import cli


@pytest.fixture()
def captured_run(monkeypatch):
    calls = {}

    def fake_run(app, host, port, log_level):
        calls.update(app=app, host=host, port=port)

    monkeypatch.setattr("posbridge.service.uvicorn.run", fake_run)
    return calls


class TestMockCommand:
    def test_starts_service_with_parsed_flags(self, captured_run):
        code = cli.main(["mock", "--mode", "empty", "--port", "9000", "--dim", "4"])
        assert code == 0
        assert captured_run["port"] == 9000
        assert captured_run["host"] == "127.0.0.1"

    def test_unknown_mode_exits_one(self, captured_run, capsys):
        code = cli.main(["mock", "--mode", "oracle"])
        assert code == 1
        assert "unknown mock mode" in capsys.readouterr().err

    def test_doc_mode_without_docs_exits_one(self, captured_run, capsys):
        code = cli.main(["mock", "--mode", "echo_targets"])
        assert code == 1
        assert "document collection" in capsys.readouterr().err


class TestServeCommand:
    def test_bad_checkpoint_exits_two(self, captured_run, capsys, tmp_path):
        code = cli.main(["serve", "--model", str(tmp_path / "missing")])
        assert code == 2
        assert "cannot load checkpoint" in capsys.readouterr().err
