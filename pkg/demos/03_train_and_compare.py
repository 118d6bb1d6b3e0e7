"""Train both graph-free baselines and the graph search pipeline on a reduced
synthetic dataset and compare test mAP.

The full-size comparison (5000 / 1000 examples, 20 epochs) lives in the
acceptance suite; this version runs in about a minute.
"""

from gsnn.evaluation import evaluate
from gsnn.pipeline import BaselineModel, GsnnModel, TrainConfig, train
from gsnn.search import GsnnConfig
from gsnn.synthdata import SceneModel, make_concept_graph, sample_examples

graph = make_concept_graph()
scenes = SceneModel(graph)
train_set = sample_examples(scenes, 1000, seed=0, split="train")
test_set = sample_examples(scenes, 300, seed=0, split="test")

# Adam for the graph network, SGD-momentum for the classifier. With this little
# data and five epochs the baselines barely leave their initialisation.
config = TrainConfig(epochs=5)

models = {
    "feature": BaselineModel("feature", 316, scenes.feature_dim, 80),
    "feature+det": BaselineModel("feature+det", 316, scenes.feature_dim, 80),
    "gsnn": GsnnModel(graph, GsnnConfig(), image_dim=scenes.feature_dim),
}
reports = {}
for name, model in models.items():
    history = train(model, train_set, config, seed=0)
    reports[name] = evaluate(model, test_set, name=name, category_names=[graph.name(v) for v in graph.label_ids])
    print(f"{name:12s} final loss {history[-1]['loss']:.4f}  test mAP {reports[name].mAP:.4f}")

delta = evaluate(models["gsnn"], test_set, baseline=reports["feature+det"],
                 category_names=[graph.name(v) for v in graph.label_ids])
best, worst = delta.top_deltas(5)
print("largest gains over feature+det:", best)
print("largest losses:", worst)
