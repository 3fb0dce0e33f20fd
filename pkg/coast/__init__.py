"""
Block compressive sensing with a trainable unfolded ISTA network that
generalizes across sampling matrices.
"""
