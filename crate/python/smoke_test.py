"""Smoke test for the hatexfer_py extension.

Builds the extension with cargo, imports it from a temporary directory and
runs a tiny cross-lingual experiment on the synthetic world.

    python3 python/smoke_test.py
"""

import glob
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build(dest):
    subprocess.run(
        ["cargo", "build", "-p", "hatexfer-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "debug", "libhatexfer_py.so")
    shutil.copy(lib, os.path.join(dest, "hatexfer_py.so"))
    sys.path.insert(0, dest)


def main():
    tmp = tempfile.mkdtemp(prefix="hatexfer-smoke-")
    build(tmp)
    import hatexfer_py as hx

    assert hx.majority(["Hate", "noHate", "Hate"]) == "Hate"
    assert hx.majority(["noHate", "noHate", "Hate"]) == "noHate"
    assert hx.target_counts(3345, 855, "ratio=7:1 mode=oversample") == (5985, 855)
    assert "gut" in hx.tokenize("Das ist gut!")

    m = hx.metrics(["noHate"] * 2759 + ["Hate"] * 773, ["noHate"] * 3532)
    assert f"{m['noHate']['f1']:.2f}" == "87.71", m
    assert f"{m['macro']['f1']:.2f}" == "43.86", m
    assert m["confusion"] == [[2759, 0], [773, 0]]

    ds = hx.Dataset("toy", ["a b", "c d", "e f"], ["Hate", "noHate", "noHate"])
    over = hx.resample(ds, "ratio=1:1 mode=oversample seed=1")
    assert over.class_counts() == (2, 2), over

    hx.write_synthetic_world(tmp, forum_posts=20)
    table = hx.EmbeddingTable.load(os.path.join(tmp, "world", "vectors", "wiki.multi.de.vec"))
    indices, length = table.encode("ein kurzer satz", 8)
    assert len(indices) == 8 and length == 3

    config = os.path.join(tmp, "crosslingual.toml")
    text = hx.desk_config("crosslingual", 1).replace(
        'stage = "crosslingual"', 'stage = "crosslingual"\narchitectures = ["cnn"]'
    ).replace("transformer = 2000", "transformer = 2000\ncnn = 300")
    with open(config, "w") as f:
        f.write(text)

    reports = hx.run(config, seed=1, out=os.path.join(tmp, "run"))
    assert [r["model"] for r in reports] == ["cnn"], reports
    assert sum(map(sum, reports[0]["confusion"])) == 3532

    checkpoint = glob.glob(os.path.join(tmp, "run", "cache", "*"))[0]
    model = hx.Model.load(checkpoint)
    p = model.probabilities("ein kurzer satz")
    assert abs(sum(p) - 1.0) < 1e-6
    test = hx.Dataset.read_tsv(os.path.join(tmp, "run", "prepared", "de_test.tsv"))
    again = model.evaluate(test)
    assert again["confusion"] == reports[0]["confusion"]

    try:
        hx.run(os.path.join(tmp, "missing.toml"))
    except ValueError:
        pass
    else:
        raise AssertionError("a missing config should raise ValueError")

    shutil.rmtree(tmp)
    print("python smoke test passed:", model.architecture, f"macro-F1 {reports[0]['macro']['f1']:.2f}")


if __name__ == "__main__":
    main()
