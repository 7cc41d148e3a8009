import json
import sys

frame = json.load(sys.stdin)
agents = [o for o in frame["objects"] if o["color_label"] == "white"
print(json.dumps({"features": {"position_of_agent": agents[0]["centroid"][0]}}))
