# Tests import process_classes and flowlens from the scripts directory
import os
import sys

sys.path.insert(1, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))
