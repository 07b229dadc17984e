from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssatlab.cli import main
from ssatlab.config import (LAMBDA_PRESETS, ExperimentSpec, format_eps, parse_config, parse_eps, parse_text,
                            resolve_lambdas)
from ssatlab.errors import ConfigurationError, ParseError
from ssatlab.telemetry import MetricsRecord, write_metrics

from conftest import DATA

PLAIN = "[attack]\nmethod = rs\neps = 64/255\n\n[train]\nepochs = 30\nmode = plain\n\n[aaer]\naaer = off\n"


def test_flag_overrides_file(tmp_path):
    (tmp_path / "a.cfg").write_text(PLAIN)
    assert parse_config(tmp_path / "a.cfg").epochs == 30
    assert parse_config(tmp_path / "a.cfg", {"epochs": "20"}).epochs == 20


def test_eps_kept_as_exact_fraction():
    spec = parse_config(text='[attack]\neps = "8/255"\n[aaer]\naaer = off\n')
    assert spec.eps == Fraction(8, 255) and isinstance(spec.eps, Fraction)
    assert parse_eps("0.25") == 0.25
    assert format_eps(Fraction(16, 255)) == "16/255"
    with pytest.raises(ConfigurationError):
        parse_eps("-1/255")
    with pytest.raises(ConfigurationError):
        parse_eps("eight")


def test_misspelled_key_names_key_and_line():
    with pytest.raises(ParseError) as info:
        parse_text("[attack]\nmethod = rs\nepislon = 8/255\n")
    assert info.value.line == 3 and info.value.key == "epislon"
    assert "line 3" in str(info.value) and "epislon" in str(info.value)


def test_parse_errors():
    cases = {
        "[train]\nepochs = many\n": 2,
        "[train]\nepochs = 3\nepochs = 4\n": 3,
        "epochs = 3\n": 1,
        "[training]\nepochs = 3\n": 1,
        "[attack]\nepochs = 3\n": 2,
        "[train]\naugment = maybe\n": 2,
        "[attack]\nmethod = pgd\n": 2,
    }
    for text, line in cases.items():
        with pytest.raises(ParseError) as info:
            parse_text(text)
        assert info.value.line == line, text


def test_resolved_spec_roundtrip():
    spec = parse_config(text=PLAIN, overrides={"epochs": "7", "alpha_mult": "1.5"})
    assert parse_config(text=spec.to_text()) == spec
    cifar = parse_config(text="[data]\ndataset = cifar10\n[attack]\neps = 16/255\n")
    assert (cifar.lambda1, cifar.lambda2, cifar.lambda3) == (1.0, 7.0, 3.25)
    assert parse_config(text=cifar.to_text()) == cifar


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 255), st.integers(1, 40), st.sampled_from(["vanilla", "rs", "n"]),
       st.sampled_from(["plain", "drop-aae"]), st.booleans(), st.floats(0.001, 1.0))
def test_roundtrip_property(k, epochs, method, mode, augment, lr):
    spec = ExperimentSpec(eps=Fraction(k, 255), epochs=epochs, method=method, mode=mode, augment=augment,
                          lr_max=lr, aaer=False).resolved()
    assert parse_config(text=spec.to_text()) == spec


def test_missing_lambdas_without_preset():
    with pytest.raises(ConfigurationError, match="Known presets"):
        parse_config(text="[attack]\neps = 64/255\n")
    spec = parse_config(text="[attack]\neps = 64/255\n[aaer]\nlambda1 = 1\nlambda2 = 2\nlambda3 = 0.5\n")
    assert spec.aaer_config().lambda2 == 2.0


def test_unknown_lambda_combination():
    with pytest.raises(ConfigurationError):
        resolve_lambdas("rs", "mnist", "8/255")
    with pytest.raises(ConfigurationError):
        resolve_lambdas("rs", "cifar10", "9/255")
    assert resolve_lambdas("RS-AAER", "cifar10", Fraction(8, 255)) == (1.0, 2.5, 1.5)
    assert all(v[0] == 1.0 for v in LAMBDA_PRESETS.values())


def test_mode_mapping():
    assert parse_config(text=PLAIN).train_config().mode == "plain"
    drop = parse_config(text=PLAIN, overrides={"mode": "drop-aae"})
    assert drop.train_config().mode == "drop_aae"
    pgd = parse_config(text=PLAIN, overrides={"method": "pgd-at"})
    assert pgd.train_config().mode == "pgd_at"


def _run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_co_check(tmp_path, capsys):
    accs = [0.2, 0.4, 0.45, 0.01, 0.0]
    recs = [MetricsRecord(i, 0.9, a, "pgd-10-1", 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0) for i, a in enumerate(accs)]
    write_metrics(recs, tmp_path / "m.csv")
    code, out, _ = _run(["co-check", str(tmp_path / "m.csv")], capsys)
    assert code == 0 and "co detected onset 3" in out


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    code, _, err = _run(["eval", "--checkpoint", str(missing), "--aaer", "off", "--data-dir", str(DATA)], capsys)
    assert code != 0
    assert err.startswith("ssat: error: FormatError:") and str(missing) in err


def test_cli_config_error_is_one_line(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("[attack]\nepislon = 1\n")
    code, _, err = _run(["train", "--config", str(tmp_path / "bad.cfg")], capsys)
    assert code == 2 and err.count("\n") == 1 and "epislon" in err and "line 2" in err


def test_cli_train_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = _run(["train", "--dataset", "gaussians", "--arch", "mlp-blobs", "--method", "rs", "--eps", "16/255", "--aaer", "off",
                          "--mode", "plain", "--epochs", "2", "--batch", "64", "--ckpt-every", "1",
                          "--out", str(out)], capsys)
    assert code == 0, text
    assert (out / "spec.cfg").exists() and (out / "metrics.csv").exists() and (out / "model.ckpt").exists()
    assert (out / "epoch001.ckpt").exists() and (out / "epoch002.ckpt").exists()
    again = parse_config(out / "spec.cfg")
    assert again.epochs == 2 and again.eps == Fraction(16, 255)


def test_cli_probe_and_surface(tmp_path, capsys):
    out = tmp_path / "probe"
    args = ["--eps", "64/255", "--aaer", "off", "--mode", "plain", "--epochs", "1", "--batch", "500",
            "--pgd-steps", "1", "--data-dir", str(DATA), "--out", str(out)]
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[data]\neval_subset = 20\n[eval]\nprobe_size = 10\nprobe_every = 4\n")
    code, text, err = _run(["probe", "--config", str(cfg)] + args, capsys)
    assert code == 0, err
    rows = (out / "probe.csv").read_text().splitlines()
    assert rows[0] == "iter,aae_count,probe_rob_acc" and len(rows) == 3
    code, text, err = _run(["surface", "--config", str(cfg), "--checkpoint", str(out / "model.ckpt"),
                            "--resolution", "3", "--output", str(tmp_path / "s.csv")] + args, capsys)
    assert code == 0, err
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5
    code, text, err = _run(["eval", "--config", str(cfg), "--checkpoint", str(out / "model.ckpt"), "--limit", "20"]
                           + args, capsys)
    assert code == 0 and "rob_acc" in text
