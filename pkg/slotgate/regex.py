import re


# Decoded answer: two integers, optionally bracketed by stray spaces.
ANSWER_RE = re.compile(r'^\s*(\d{1,3})\s+(\d{1,3})\s*$')
