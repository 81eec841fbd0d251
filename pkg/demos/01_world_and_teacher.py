"""
A synthetic world and its teacher
=================================

The lab replaces image datasets with a generative world: every class owns a
few content modes, every mode is seen under a few styles, and each class also
has distractor modes that look plausible but never appear in the training
split.  This script builds a small world, trains a teacher on it and checks the
property energy guidance relies on: distractors get higher free energy.
"""

# %%
# Build a four-class world and draw the splits.
import numpy as np

from dfkdlab.guidance import energy
from dfkdlab.nets import ClassifierModel, TrainConfig, train_classifier
from dfkdlab.world import WorldSpec, build_world, sample_split

spec = WorldSpec(K=4, n_content=3, n_style=2, d_x=16, ood_extra=2, factor_dim=6, seed=5)
world = build_world(spec)
train = sample_split(world, "id_train", 1500)
test = sample_split(world, "id_test", 600)
prior = sample_split(world, "broad_prior", 3000)
print("class names:", world.class_names[: spec.K])
print("broad prior distractor share: %.2f" % prior.is_ood.mean())

# %%
# Train the teacher.  A tiny MLP with batch norm is plenty here.
teacher, history = train_classifier(train, TrainConfig(epochs=8), model=ClassifierModel(16, (24, 16), 4, seed=1))
print("teacher test accuracy: %.3f" % (teacher.predict(test.x) == test.y).mean())

# %%
# Free energy is the negative log-sum-exp of the logits.  In-distribution
# samples should sit lower than the distractors.
e_id = energy(teacher.logits(test.x)).data
e_ood = energy(teacher.logits(prior.x[prior.is_ood])).data
print("mean energy  id %.2f   distractor %.2f" % (e_id.mean(), e_ood.mean()))
print("distractors above the id median: %.0f%%" % (100 * (e_ood > np.median(e_id)).mean()))
