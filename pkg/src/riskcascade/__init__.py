"""Two-stage cascaded-ensemble text classification.

A fast stage-1 scorer with length-confidence routing accepts easy posts;
ambiguous or long ones escalate to persona-agent voting or to a weighted
soft vote over classical learners trained on extracted psychological
feature vectors. Includes the evaluation harness for cross-domain
robustness gaps and stage-cost accounting.
"""

__version__ = "0.1.0"
