"""Walk through how a caption becomes model input, and what the encoder may look at.

Run: python demos/01_text_and_masks.py
"""

import numpy as np

from vipg import model as M
from vipg import textprep as tp
from vipg.cli import render_mask

# A caption is tagged, its nouns are swapped for numbered placeholders, and
# the (placeholder, word) pairs form the object dictionary.
p = tp.process("several men in hard hats are operating a giant pulley system .")
print(tp.format_table(p))
print()

# Putting the words back into the placeholders recovers the sentence exactly.
assert p.reconstruct() == tp.tokenize(p.raw)

# Object and relation tokens are ids in a shared vocabulary; the decoder
# target keeps the real nouns.
vocab = tp.build_vocab([p])
obj, rel, tgt = tp.to_model_input(p, vocab)
print("object ids  ", obj)
print("relation ids", rel)
print("target ids  ", tgt)
print()

# The encoder sees [image; objects; relation] but attention is partial:
# image rows see image and objects, object rows see only objects, relation
# rows see objects and relation. Image and relation never meet.
print(render_mask(2, 3, 4))
print()

# Batched masks add padding: padded query rows attend only to themselves so
# the softmax stays defined, and padded keys are hidden from everyone.
mask = M.batch_partial_mask((2, 3, 4), (np.array([2, 2]), np.array([3, 1]), np.array([4, 2])))
print("second example, padded:")
print(mask[1].astype(int))
