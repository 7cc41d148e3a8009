import json
import sys

import boxing_helpers

frame = json.load(sys.stdin)
print(json.dumps({"features": boxing_helpers.extract(frame)}))
