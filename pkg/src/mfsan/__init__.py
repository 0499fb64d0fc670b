"""Multi-source unsupervised domain adaptation with two alignment stages.

Labeled samples from several source domains and unlabeled samples from one
target domain train a network made of one shared feature extractor, one
extractor per source, and one classifier per source.  Each source-target
pair's feature distributions are pulled together with a kernel two-sample
distance in that pair's own feature space, and the classifiers' probability
outputs on target samples are pulled together directly.  Target labels are
predicted by averaging all classifier outputs.

Everything runs on a small float64 autodiff core; see the README for the
module map, CLI, and file formats.
"""

from .autodiff import GradCheckReport, Tensor, check_gradients, matmul, softmax
from .kernels import KernelSpec, MmdEstimate, gram, median_heuristic, mmd_biased, mmd_unbiased

__version__ = "0.1.0"
