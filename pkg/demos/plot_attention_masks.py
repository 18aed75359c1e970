"""
Masking token interactions
==========================

The fusion transformer sees the class token, patch tokens and every
attribute and object text row. Cutting attribute-object attention leaves the
corresponding weights at exactly zero and changes the refined class token.
"""

import torch

from mvp_integrator import Integrator, IntegratorConfig, MaskFlags, assemble_tokens, build_attention_mask

torch.manual_seed(0)
seq = assemble_tokens(torch.randn(1, 8), torch.randn(1, 2, 8), torch.randn(3, 8), torch.randn(2, 8))
print("segment boundaries (cls, patches, attrs, objs):", seq.boundaries)

for flags in (MaskFlags(), MaskFlags(attr_obj=False), MaskFlags(attr_attr=False), MaskFlags(all_primitives=False)):
    mask = build_attention_mask(flags, seq.boundaries)
    print(flags, "blocked edges:", int((~mask).sum()))

# one layer is not enough: the class token's own attention row is never masked,
# so the cut only reaches it through the primitive tokens of a second layer
integ = Integrator(IntegratorConfig(dim=8, heads=2, layers=2))
full = integ(seq)
cut = integ(seq, MaskFlags(attr_obj=False))
print("refined class token shift:", (full.cls - cut.cls).norm().item())

_, i_end, a_end, n = seq.boundaries
print("attr->obj weights:\n", cut.attention[0][0, 0, i_end:a_end, a_end:n])
