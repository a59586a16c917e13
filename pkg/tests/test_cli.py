import numpy as np
import pytest

from helioforge.cli import EXIT_ERROR, EXIT_OK, EXIT_STORAGE, main
from helioforge.timeseries import read_csv, read_forecast_csv


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--days", "30", "--seed", "3", "--out", str(root / "data")]) == EXIT_OK
    assert main(["build", "--data", str(root / "data"), "--store", str(root / "store"), "--split", "15,10,5"]) == EXIT_OK
    return root


def common(root):
    return ["--data", str(root / "data"), "--store", str(root / "store"), "--split", "15,10,5"]


def test_model_commands(workdir, capsys):
    assert main(["fit", *common(workdir), "--target", "gp", "--spec", "arix"]) == EXIT_OK
    assert main(["gate-train", *common(workdir), "--max-samples", "500"]) == EXIT_OK
    assert main(["gate-eval", *common(workdir)]) == EXIT_OK
    assert main(["ensemble-fit", *common(workdir), "--framework", "time-order"]) == EXIT_OK
    assert main(["ensemble-fit", *common(workdir), "--gated"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "support vectors" in out and "es1:" in out


def test_predict_and_evaluate(workdir, capsys):
    out = workdir / "f.csv"
    assert main(["predict", *common(workdir), "--predictor", "SR-5", "--origin", "2017-03-28T06:00:00", "--out", str(out)]) == EXIT_OK
    fm = read_forecast_csv(out)
    assert len(fm) == 1 and fm.horizon == 96
    rep = workdir / "report"
    assert main(["evaluate", *common(workdir), "--stride", "24", "--out", str(rep), "--correlogram", "100"]) == EXIT_OK
    table = (rep / "table.csv").read_text().splitlines()
    assert len(table) == 10 and table[1].startswith("SR-1,")
    assert "significant SR PACF lags" in capsys.readouterr().out


def test_clean(workdir):
    src = workdir / "data" / "sr.csv"
    assert main(["clean", "--in", str(src), "--out", str(workdir / "c.csv")]) == EXIT_OK
    assert len(read_csv(workdir / "c.csv")) == len(read_csv(src))
    assert main(["clean", "--out", str(workdir / "x.csv")]) == EXIT_ERROR


def test_impact(tmp_path):
    assert main(["impact", "--seeds", "3", "--rmse-targets", "5,10", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["SMPC-P", "SMPC-1", "SMPC-2"]


def test_serve_once(workdir, tmp_path, capsys):
    conf = tmp_path / "svc.conf"
    data = workdir / "data"
    conf.write_text(
        f"source.sr = sr {data / 'sr.csv'}\nsource.gp = gp {data / 'gp.csv'}\n"
        f"source.svc = service_forecast {data / 'service.csv'}\n"
        f"output_dir = out\ndatabase = s.sqlite\npredictor_store = {workdir / 'store'}\n"
    )
    assert main(["serve", "--config", str(conf), "--once", "--now", "2017-03-20T11:59:00"]) == EXIT_OK
    f = tmp_path / "out" / "prediction_20170320T120000Z.csv"
    lines = f.read_text().splitlines()
    assert len(lines) == 97 and lines[1].endswith(",0")


def test_error_exit_codes(tmp_path):
    assert main(["predict", "--data", str(tmp_path / "nope"), "--predictor", "SR-1"]) == EXIT_ERROR
    (tmp_path / "blocker").write_text("")
    conf = tmp_path / "svc.conf"
    conf.write_text(f"database = blocker/db.sqlite\npredictor_store = {tmp_path}\n")
    assert main(["serve", "--config", str(conf), "--once"]) == EXIT_STORAGE
    with pytest.raises(SystemExit):
        main(["no-such-command"])
