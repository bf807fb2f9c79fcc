"""How many parameters does each adaptation regime update?

Residual adapters trade capacity against size through the bottleneck width
d_ada. This script prints the updated-parameter count per d_ada for the
paper-scale model next to the whole-model (SAFT) reference.
"""

from draftlab.experiments import STANDARD_DADA, format_millions, saft_reference, adapter_count_rows
from draftlab.model import paper_preset

config = paper_preset()
reference = saft_reference(config)
print(f"whole pretrained model: {reference} parameters ({format_millions(reference)})")
print("d_ada  adapter params  share of model")
for row in adapter_count_rows(config, STANDARD_DADA):
    print(f"{row['d_ada']:>5}  {format_millions(row['total']):>14}  {100 * row['relative']:>13.1f}%")
