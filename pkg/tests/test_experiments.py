import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from PIL import Image

from conftest import TINY_CONFIG
from railsynth.errors import ConfigError, MissingArtifact
from railsynth.experiments import (
    FID_COLUMNS,
    RunManifest,
    Workspace,
    config_hash,
    derive_seed,
    parse_regime,
    read_config,
    read_fid_report,
    render_report,
    resolve_config,
    run_generation_grid,
    run_segmentation_grid,
    write_config,
)
from railsynth.conditioning import Scheme
from railsynth.prompting import PromptKind, Regime
from railsynth.segmentation import TABLE_COLUMNS, read_seg_csv


def _cfg(out, **extra):
    return resolve_config({**TINY_CONFIG, **extra}, {"run.out": str(out)})


def test_config_hash_ignores_key_order_and_output_dir():
    items = list(TINY_CONFIG.items())
    a = resolve_config(dict(items), {"run.out": "x"})
    b = resolve_config(dict(reversed(items)), {"run.out": "y"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(resolve_config({**TINY_CONFIG, "run.seed": 1}))


def test_config_round_trip(tmp_path):
    cfg = _cfg(tmp_path)
    write_config(cfg, tmp_path / "c.txt")
    assert resolve_config(read_config(tmp_path / "c.txt")) == cfg


def test_precedence_and_scale():
    cfg = resolve_config({"train.batch": 2}, {"train.batch": 3})
    assert cfg["train.batch"] == 3
    paper = resolve_config(scale="paper")
    assert paper["data.size"] == 512 and paper["seg.n"] == 3000 and paper["fid.n"] == 1700


@pytest.mark.parametrize(
    "values, field",
    [
        ({"condition.canny_low": 200}, "condition.canny_low"),
        ({"no.such_key": 1}, "no.such_key"),
        ({"data.size": 30}, "data.size"),
        ({"grid.regimes": ["none+pos"]}, "grid.regimes"),
        ({"seg.setups": ["G"]}, "seg.setups"),
    ],
)
def test_invalid_config_names_field(values, field):
    with pytest.raises(ConfigError) as exc:
        resolve_config(values)
    assert exc.value.field == field


def test_derive_seed():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert 0 <= derive_seed(123, "x") < 2**31


def test_parse_regime():
    assert parse_regime("caption+neg") == Regime(PromptKind.CAPTION, True)
    assert parse_regime("none") == Regime(PromptKind.NONE)


def test_manifest(tmp_path):
    cfg = _cfg(tmp_path)
    m = RunManifest(tmp_path, cfg)
    m.append("x", value=1)
    assert not m.completed("step")
    m.mark_done("step")
    assert m.completed("step")
    assert RunManifest(tmp_path, {**cfg, "run.seed": 5}).completed("step") is False
    assert [e["event"] for e in m.events()] == ["x", "done"]


def test_missing_control_without_auto(tmp_path):
    ws = Workspace(_cfg(tmp_path, **{"train.auto": False}))
    with pytest.raises(MissingArtifact):
        ws.train_control(Scheme.MASK, Regime(PromptKind.NONE))


def test_report_needs_artifacts(tmp_path):
    with pytest.raises(MissingArtifact):
        render_report(tmp_path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = _cfg(out)
    gen_rows = run_generation_grid(cfg)
    seg_rows = run_segmentation_grid(cfg)
    return out, cfg, gen_rows, seg_rows


def test_generation_grid_layout(tiny_run):
    out, _, rows, _ = tiny_run
    assert len(rows) == 6 and all(len(r) == 5 for r in rows)
    assert [r[0]["prompt_regime"] for r in rows] == ["none", "fixed", "caption", "none+neg", "fixed+neg",
                                                     "caption+neg"]
    assert [c["condition_scheme"] for c in rows[0]] == ["mask", "canny", "cmb12", "cmb21", "cmb111"]
    lines = (out / "fid_grid.md").read_text().splitlines()
    assert lines[0] == "| Prompts \\ Cond. | Seg. masks | Canny | Cmb12 | Cmb21 | Cmb111 |"
    assert [line.split("|")[1].strip() for line in lines[2:8]] == [
        "No pr.", "Fixed pr.", "BLIP-2 pr.", "Neg. pr.", "Fixed pr. + Neg. pr.", "BLIP-2 pr. + Neg. pr.",
    ]
    assert all(line.count("**") >= 2 for line in lines[2:8])
    csv_lines = (out / "fid_report.csv").read_text().splitlines()
    assert csv_lines[0] == ",".join(FID_COLUMNS) and len(csv_lines) == 1 + 30 + 1
    back = read_fid_report(out / "fid_report.csv")
    assert [c["fid"] for r in back for c in r] == pytest.approx([c["fid"] for r in rows for c in r], abs=1e-6)


def test_seg_table_layout(tiny_run):
    out, _, _, rows = tiny_run
    table = read_seg_csv(out / "seg_table.csv")
    assert [r["Setup"] for r in table] == list("ABCDEF")
    assert list(table[0]) == list(TABLE_COLUMNS)
    assert [(r["#Real"], r["#Synthetic"]) for r in table] == [(8, 0), (0, 8), (8, 8), (4, 4), (4, 4), (4, 4)]
    assert len((out / "seg_table.md").read_text().splitlines()) == 8


def test_manifest_traces_every_result(tiny_run):
    out, cfg, _, _ = tiny_run
    m = RunManifest(out, cfg)
    events = m.events()
    assert {e["config_hash"] for e in events} == {config_hash(cfg)}
    cells = m.events("fid_cell")
    assert len(cells) == 30
    caption_cell = next(e for e in cells if e["result"]["prompt_regime"] == "caption+neg")
    assert all(p["captioner"] == "stub-caption-v1" and p["negative"] for p in caption_cell["prompts"])
    corpora = m.events("corpus")
    assert len(corpora) == 6
    for c in corpora:
        assert not {item["mask_id"] for item in c["composition"]} & set(c["validation"])
    assert len(m.events("seg_run")) == 12
    assert m.completed("generation-grid") and m.completed("segmentation-grid")


def test_rerun_uses_caches_and_is_identical(tiny_run):
    out, cfg, _, _ = tiny_run
    before = (out / "fid_report.csv").read_bytes(), (out / "seg_table.csv").read_bytes()
    n_events = len(RunManifest(out, cfg).events())
    run_generation_grid(cfg)
    run_segmentation_grid(cfg)
    assert ((out / "fid_report.csv").read_bytes(), (out / "seg_table.csv").read_bytes()) == before
    new = RunManifest(out, cfg).events()[n_events:]
    assert not [e for e in new if e["event"] in ("fid_cell", "seg_run")]


def test_report_renders(tiny_run):
    text = render_report(tiny_run[0])
    assert "Generation grid" in text and "Rail segmentation" in text and "| F |" in text


SMALL = {"grid.regimes": ["none", "fixed+neg"], "grid.schemes": ["mask", "cmb111"]}


def test_fresh_directory_reproduces_bytes(tmp_path):
    run_generation_grid(_cfg(tmp_path / "a", **SMALL))
    run_generation_grid(_cfg(tmp_path / "b", **SMALL))
    assert (tmp_path / "a" / "fid_report.csv").read_bytes() == (tmp_path / "b" / "fid_report.csv").read_bytes()
    for img in (tmp_path / "a" / "generated").rglob("*.png"):
        assert img.read_bytes() == (tmp_path / "b" / img.relative_to(tmp_path / "a")).read_bytes()


def test_interrupted_grid_resumes(tmp_path):
    cfg = _cfg(tmp_path / "r", **SMALL)
    assert run_generation_grid(cfg, stop_after=3) is None
    assert len(list((tmp_path / "r" / "cells").glob("*.json"))) == 3
    rows = run_generation_grid(cfg)
    assert len(RunManifest(tmp_path / "r", cfg).events("fid_cell")) == 4
    ref = run_generation_grid(_cfg(tmp_path / "ref", **SMALL))
    assert [[c["fid"] for c in r] for r in rows] == [[c["fid"] for c in r] for r in ref]


def test_real_images_as_synthetic_score_zero(tmp_path):
    rows = run_generation_grid(_cfg(tmp_path, **{"grid.synth_source": "real"}))
    assert all(c["fid"] < 1e-6 for r in rows for c in r)


def test_changed_config_invalidates_cells(tmp_path):
    out = tmp_path / "c"
    run_generation_grid(_cfg(out, **{**SMALL, "grid.synth_source": "real"}))
    rows = run_generation_grid(_cfg(out, **SMALL))
    assert any(c["fid"] > 1e-3 for r in rows for c in r)
    assert json.loads(next((out / "cells").glob("*.json")).read_text())["config_id"] == config_hash(_cfg(out, **SMALL))


class _FlakyCaptioner(BaseHTTPRequestHandler):
    """Refuses images whose pixel sum is divisible by 3, captions the rest."""

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        img = np.asarray(Image.open(io.BytesIO(base64.b64decode(body["image"]))))
        if int(img.sum()) % 3 == 0:
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({"caption": "a railway track", "model": "flaky-test"}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_failed_captions_skip_images(tmp_path, caplog):
    server = HTTPServer(("127.0.0.1", 0), _FlakyCaptioner)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        cfg = _cfg(tmp_path, **{"grid.regimes": ["caption"], "grid.schemes": ["mask"], "fid.n": 6,
                                "prompts.captioner_url": f"http://127.0.0.1:{server.server_address[1]}"})
        ws = Workspace(cfg)
        val = ws.val_pairs[:6]
        refused = sum(int(p.image.sum()) % 3 == 0 for p in val)
        assert 0 < refused < len(val)
        with caplog.at_level("WARNING"):
            rows = run_generation_grid(cfg)
    finally:
        server.shutdown()
        server.server_close()
    cell = rows[0][0]
    assert cell["n_real"] == len(val) and cell["n_synth"] == len(val) - refused
    assert "skipping image" in caplog.text
    prompts = RunManifest(tmp_path, cfg).events("fid_cell")[0]["prompts"]
    assert {p["captioner"] for p in prompts} == {"flaky-test"}
