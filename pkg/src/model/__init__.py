# Embedding network and template matching
from .embedding import NetParams, Embedding, init_net, forward, train
from .matcher import Template, make_template, score, eer, roc_points
