import runpy
from pathlib import Path

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_benchmark_runs(capsys):
    main = runpy.run_path(str(BENCH))["main"]
    main(["--size", "8x8", "--bands", "3", "--superpixels", "4", "--repeat", "1"])
    out = capsys.readouterr().out
    for name in ("candidates", "assign_forward", "consistency"):
        assert name in out
