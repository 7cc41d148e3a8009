import json
import sys

data = json.load(sys.stdin)
before, after = data["single"]
a = before["position_of_skier_x"]
b = after["position_of_skier_x"]
speed = None if a is None or b is None else b - a
print(json.dumps({"features": {"horizontal_speed_of_skier": speed}}))
