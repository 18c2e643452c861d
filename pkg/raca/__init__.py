"""
raca - Relation-aware credit assignment for cooperative multi-agent Q-learning.

Recurrent, population-invariant agent Q-networks with attention over visible
entities, a visibility-graph GCN that weights each agent's contribution to a
monotone mixing network, and a small combat arena to train and transfer on.
"""

__version__ = "0.1.0"
