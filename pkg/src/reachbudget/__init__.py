"""Minimum-cost reach-avoid control with a learned cost budget.

The package trains a budget-conditioned policy whose value function
answers "can this state reach the goal safely within budget z", then
bisects that value in z to recover the cheapest feasible budget.
"""

__version__ = "0.1.0"
