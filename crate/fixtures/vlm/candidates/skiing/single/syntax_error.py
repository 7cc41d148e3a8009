import json
import sys

def extract(frame)
    w = frame["image_width"]
    return {"position_of_skier_x": None}

print(json.dumps({"features": extract(json.load(sys.stdin))}))
