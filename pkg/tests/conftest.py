import numpy as np
import pytest

from segbert.features import AlignmentRecord, MelSpectrogram, Phone, Utterance
from segbert.speechbert import SpeechBertConfig, SpeechBertModel
from segbert.toy import ToyCorpusSpec, generate_utterances
from segbert.tts import TTSConfig


def make_alignment(bounds, syllables=()):
    phones = tuple(Phone(f"p{k}", s, e) for k, (s, e) in enumerate(bounds))
    return AlignmentRecord(phones, tuple(syllables))


def make_utterance(mel, bounds, syllables=(), tokens=None, uid="u0", speaker=0):
    tokens = tuple(tokens) if tokens is not None else tuple(range(len(bounds)))
    return Utterance(uid, tokens, MelSpectrogram(np.asarray(mel, dtype=np.float64)),
                     make_alignment(bounds, syllables), speaker)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_utterances(ToyCorpusSpec(utterance_count=4, seed=3))


@pytest.fixture
def small_bert_cfg():
    return SpeechBertConfig(vocab_size=12, n_mels=8, d_model=16, heads=2, d_ff=32,
                            enc_layers=1, speech_enc_layers=1, dec_layers=1)


@pytest.fixture
def small_bert(small_bert_cfg):
    return SpeechBertModel(small_bert_cfg, seed=5)


def small_tts_cfg(**kw):
    base = dict(vocab_size=12, n_mels=8, d_model=16, heads=2, d_ff=32, enc_layers=1, dec_layers=1,
                T_S=4, d_E=16, dyn_proj_dim=10, postnet_channels=8, postnet_kernel=3)
    base.update(kw)
    return TTSConfig(**base)


PIPELINE_CONFIG = """\
[run]
seed = {seed}
bert_steps = {bert_steps}
tts_steps = {tts_steps}
[tts]
dynamic_embedding = true
max_decode_frames = 90
"""


def run_pipeline(root, seed=0, bert_steps=20, tts_steps=20, utterances=8):
    """gen -> template build -> bert pretrain -> tts train -> tts synth -> eval compare.
    Returns the paths of every checkpoint and report written."""
    from segbert.cli import main

    root.mkdir(parents=True, exist_ok=True)
    corpus, hyp = root / "corpus", root / "hyp"
    cfg = root / "run.ini"
    cfg.write_text(PIPELINE_CONFIG.format(seed=seed, bert_steps=bert_steps, tts_steps=tts_steps))
    steps = [
        ["gen", "--out", str(corpus), "--utterances", str(utterances), "--seed", str(seed)],
        ["template", "build", "--corpus", str(corpus), "--out", str(root / "models" / "template.sbtp")],
        ["bert", "pretrain", "--corpus", str(corpus), "--template", str(root / "models" / "template.sbtp"),
         "--config", str(cfg), "--out", str(root / "models" / "bert.sbtc")],
        ["tts", "train", "--corpus", str(corpus), "--bert", str(root / "models" / "bert.sbtc"),
         "--config", str(cfg), "--out", str(root / "models" / "tts.sbtc")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    for txt in sorted(corpus.glob("*.txt"))[:2]:
        argv = ["tts", "synth", "--model", str(root / "models" / "tts.sbtc"),
                "--bert", str(root / "models" / "bert.sbtc"), "--text", str(txt),
                "--out", str(hyp / f"{txt.stem}.mel")]
        assert main(argv) == 0, argv
    assert main(["eval", "compare", "--ref", str(corpus), "--hyp", str(hyp),
                 "--out", str(root / "report.csv")]) == 0
    return {
        "template": root / "models" / "template.sbtp",
        "bert": root / "models" / "bert.sbtc",
        "tts": root / "models" / "tts.sbtc",
        "synth": sorted(hyp.glob("*.mel")),
        "report": root / "report.csv",
        "logs": sorted((root / "models").glob("*.log.csv")),
    }
