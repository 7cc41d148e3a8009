import json
import sys

frame = json.load(sys.stdin)
w, h = frame["image_width"], frame["image_height"]
skier = [o for o in frame["objects"] if o["label"] == "red"][0]
print(json.dumps({"features": {"position_of_skier_x": skier["centroid"][0] / w}}))
