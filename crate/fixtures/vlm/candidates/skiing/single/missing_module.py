import json
import sys

from skiutils import find_skier, find_gate, find_tree

frame = json.load(sys.stdin)
print(json.dumps({"features": {**find_skier(frame), **find_gate(frame), **find_tree(frame)}}))
