import csv
import json

from kndm.cli import main
from kndm.meshio import load_mesh


def test_cli_full_pipeline(tmp_path, capsys):
    frames_dir = tmp_path / "frames"
    stream = tmp_path / "seq.kndm"
    decoded_dir = tmp_path / "decoded"
    csv_path = tmp_path / "metrics.csv"

    assert main(["synth", "bend", "4", "6", str(frames_dir), "--seed", "3"]) == 0
    assert main(["encode", str(frames_dir), str(stream),
                 "--gof", "2", "--nodes", "5", "--iframe-bits", "12",
                 "--octree-depth", "3", "--leaf-budget", "32"]) == 0
    assert stream.exists() and stream.stat().st_size > 0
    assert main(["decode", str(stream), str(decoded_dir)]) == 0
    decoded = sorted(decoded_dir.glob("*.obj"))
    assert len(decoded) == 4
    mesh = load_mesh(decoded[0])
    assert mesh.num_vertices == 36

    assert main(["metrics", str(frames_dir), str(decoded_dir),
                 "--csv", str(csv_path)]) == 0
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert all(float(r["p2s_rmse"]) < 0.2 for r in rows)


def test_cli_report_and_sweep(tmp_path, capsys):
    frames_dir = tmp_path / "frames"
    stream = tmp_path / "seq.kndm"
    main(["synth", "rigid", "3", "6", str(frames_dir)])
    main(["encode", str(frames_dir), str(stream), "--gof", "3", "--nodes", "4",
          "--octree-depth", "3", "--leaf-budget", "16"])
    capsys.readouterr()
    main(["report", str(stream)])
    report = json.loads(capsys.readouterr().out)
    assert report["total"] == stream.stat().st_size

    sweep_spec = tmp_path / "sweep.json"
    out_csv = tmp_path / "sweep.csv"
    sweep_spec.write_text(json.dumps({
        "sequence": {"kind": "BEND", "frames": 3, "resolution": 6, "seed": 1},
        "configs": [
            {"gof_size": 3, "num_keynodes": 4,
             "residual": {"depth": 3, "leaf_budget": 16}},
            {"gof_size": 1, "num_keynodes": 4},
        ],
    }))
    assert main(["sweep", str(sweep_spec), str(out_csv)]) == 0
    with open(out_csv) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(float(r["total_bytes"]) > 0 for r in rows)
