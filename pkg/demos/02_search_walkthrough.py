"""Follow one forward pass of the graph search network: which nodes start
active, what each expansion round picks, and how the output rows line up."""

import numpy as np

from gsnn.config import substream
from gsnn.numeric import ParameterSet
from gsnn.propagation import ModelDims, init_propagation_params
from gsnn.search import GsnnConfig, importance_targets, run_gsnn
from gsnn.synthdata import SceneModel, make_concept_graph, sample_examples

graph = make_concept_graph()
config = GsnnConfig()            # T=3 steps, P=5 expansions per round, H=10
params = ParameterSet()
init_propagation_params(params, ModelDims(config.hidden_dim, 1, config.out_dim, len(graph.edge_types),
                                          graph.num_nodes), substream(0, "init"))

example = sample_examples(SceneModel(graph), 1, seed=4)[0]
result = run_gsnn(graph, example.detections, params, config)
sub = result.subgraph

print("detected:", [graph.name(v) for v in sub.detected])
print("rows propagated at each step:", result.rows)
for t, rnd in enumerate(sub.importance_log, start=1):
    print(f"round {t}: scored {rnd.num_scored} nodes, expanded {[graph.name(v) for v in rnd.chosen]}")
print(f"{sub.num_active} of {graph.num_nodes} nodes active, {len(sub.expanded)} expanded")

# The importance net is trained toward gamma^hops from the true labels.
positives = [graph.label_ids[i] for i in np.flatnonzero(example.labels)]
targets = importance_targets(graph, positives, config.importance_discount, config.importance_max_hops)
print("distinct target values:", sorted({round(float(x), 4) for x in targets}))
