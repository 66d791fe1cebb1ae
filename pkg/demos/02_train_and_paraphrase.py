"""Train a small model on synthetic caption/feature pairs and paraphrase with it.

The synthetic features are a fixed projection of each caption's nouns plus
noise, so the image side genuinely carries the objects. Takes a few seconds.

Run: python demos/02_train_and_paraphrase.py
"""

import tempfile
from pathlib import Path

from vipg import dataio as dio
from vipg import evalmetrics as em
from vipg import model as M
from vipg import textprep as tp
from vipg import training as T
from vipg.inference import Paraphraser

work = Path(tempfile.mkdtemp(prefix="vipg-demo-"))

# 1. data: 128 captions, each with a 4 x 32 feature grid
out = dio.synth_generate(128, seed=3, spec=None, out_dir=work / "data")
records = dio.load_manifest(out.manifest)
processed = [tp.process(r.caption) for r in records]
vocab = tp.build_vocab(processed)
examples = [dio.encode_example(r.id, p, vocab, r.feature_path) for r, p in zip(records, processed)]
dio.attach_features(examples, work / "data")
print(f"{len(examples)} examples, vocabulary of {len(vocab)}")

# 2. model: two decoding routes share one decoder; the image route learns to
# caption and the text route is pulled towards it through the symmetric KL
cfg = M.ModelConfig(vocab_size=len(vocab), d_model=64, heads=4, enc_layers=2, dec_layers=2, d_ff=256)
model = M.ParaphraseModel(cfg, seed=3)
print(f"{M.parameter_count(cfg):,} parameters")

train_cfg = T.TrainConfig(max_steps=300, batch_size=16, seed=3, val_every=100)
res = T.fit(model, examples, examples[:32], train_cfg, work / "run")
print(f"step {res.last_metrics['step']}: ce {res.last_metrics['ce']:.3f}  kl {res.last_metrics['kl']:.3f}")

# 3. inference needs no image: the text route decodes from objects and relation
para = Paraphraser(model, vocab)
sources = [r.caption for r in records[:6]] + ["a small dog waits near the bench ."]
outputs = [para.paraphrase(s) for s in sources]
for s, o in zip(sources, outputs):
    print(f"  {s}\n    -> {o}")

# 4. diversity: lower Self-BLEU means the paraphrase strays further from its source
rep = em.report([tp.tokenize(s) for s in sources], [tp.tokenize(o) for o in outputs])
print({k: round(v, 3) for k, v in rep.items()})
print(f"checkpoints in {work / 'run'}")
