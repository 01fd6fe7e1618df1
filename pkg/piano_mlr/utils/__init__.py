"""
Utility modules for the PIANO multinomial logistic regression solvers.
"""
