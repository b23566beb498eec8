import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

LISTING = ("planner -> (explorer)^{||3,4} -> (engineer)^{3,6} -> reviewer"
           " -> (engineer^{2-4} -> reviewer)? -> verifier -> terminal")
