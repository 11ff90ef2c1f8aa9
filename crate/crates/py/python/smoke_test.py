"""End-to-end smoke test of the Python bindings on a tiny synthetic corpus.

Build and install the extension first:

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import math
import tempfile
from pathlib import Path

import xling_py as x

TINY = """
seed = 3
[corpus.sizes]
source = 30
unlabeled = 10
finetune = 8
text = 60
test = 6
[corpus.target]
max_sentence_words = 2
[encoder]
layers = 2
dim = 32
inner_dim = 64
heads = 2
[pretrain]
steps = 10
[pretrain_plus]
steps = 10
[finetune]
steps = 10
[transcoder_train]
steps = 10
[transcoder_finetune]
steps = 5
"""


def main() -> None:
    # Standalone losses and metrics.
    lp = [[math.log(0.5), math.log(0.5)]] * 2
    loss, grad = x.ctc_loss(lp, [0])
    assert abs(loss - (-math.log(0.75))) < 1e-9, loss
    assert len(grad) == 4
    assert abs(x.smooth_l1([0.0], [0.25], 0.25) - 0.125) < 1e-12
    assert x.edit_distance(["a", "b", "c"], ["a", "x", "c"]) == (1, 1, 0, 0)
    phonemes, targets = x.align_words(["ab", "c"], {"ab": [0, 1], "c": [2]})
    assert phonemes == [0, 1, 2] and targets == ["*", "ab", "c"]
    assign = x.kmeans([[0.0], [0.1], [10.0], [10.1]], 2, seed=1)
    assert x.cluster_purity(assign, [0, 0, 1, 1]) == 1.0
    assert abs(x.pnmi(assign, [0, 0, 1, 1]) - 1.0) < 1e-12

    # The training pipeline.
    cfg = x.RunConfig(TINY)
    corpus = x.Corpus.generate(cfg)
    assert corpus.size("finetune") == 8
    utt = corpus.utterance("test", 0)
    assert len(utt["frame_labels"]) == len(utt["features"])

    model = x.AcousticModel(cfg)
    records = model.pretrain(corpus, cfg)
    assert any(metric == "ctc_loss" for _, metric, _ in records)
    model.pretrain(corpus, cfg, plus=True)
    model.finetune(corpus, cfg)
    per = model.per(corpus)
    assert 0.0 <= per

    transcoder, _ = x.Transcoder.train(corpus, cfg)
    transcoder.finetune(model, corpus, cfg)
    wer = transcoder.wer(model, corpus)
    post = model.posteriors(utt["features"])
    words = transcoder.decode(post)
    assert isinstance(words, list)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        model.save(path)
        again = x.AcousticModel.load(path)
        assert again.decode(utt["features"]) == model.decode(utt["features"])

    print(f"smoke test ok: PER {per:.3f}, WER {wer:.3f}")


if __name__ == "__main__":
    main()
