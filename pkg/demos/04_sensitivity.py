"""Which hidden states and detections does one label's probability depend on?"""

from gsnn.evaluation import sensitivity
from gsnn.pipeline import GsnnModel, TrainConfig, train
from gsnn.search import GsnnConfig
from gsnn.synthdata import SceneModel, make_concept_graph, sample_examples

graph = make_concept_graph()
scenes = SceneModel(graph)
model = GsnnModel(graph, GsnnConfig(), image_dim=scenes.feature_dim)
train(model, sample_examples(scenes, 300, seed=1), TrainConfig(epochs=2), seed=1)

example = sample_examples(scenes, 1, seed=1, split="test")[0]
label = int(example.labels.argmax())
table = sensitivity(model, example, label)
print(f"label {table.label_name}: probability {table.probability:.3f}")
print("top detections:", table.ranked_detections(5))
for t in range(table.hidden.shape[0]):
    print(f"state {t + 1}:", table.ranked_hidden(t, 5))
print(f"{len(table.expanded_edges)} edges touch expanded nodes, e.g. {table.expanded_edges[:3]}")
