"""Builds natural_en.jsonl.gz: English prose from Python standard library docstrings."""
import gzip, inspect, json, pkgutil, importlib, re, sys, warnings

warnings.filterwarnings("ignore")
TARGET = 1_100_000
SKIP = {"antigravity", "this", "idlelib", "tkinter", "turtle", "turtledemo", "test", "lib2to3", "ensurepip", "venv"}

def docs():
    for m in sorted(sys.stdlib_module_names):
        if m.startswith("_") or m in SKIP:
            continue
        try:
            mod = importlib.import_module(m)
        except Exception:
            continue
        yield m, inspect.getdoc(mod)
        for name, obj in sorted(vars(mod).items()):
            if name.startswith("_") or getattr(obj, "__module__", None) != m:
                continue
            yield f"{m}.{name}", inspect.getdoc(obj)
            if inspect.isclass(obj):
                for attr, member in sorted(vars(obj).items()):
                    if not attr.startswith("_"):
                        yield f"{m}.{name}.{attr}", inspect.getdoc(member)
    from pydoc_data.topics import topics
    for key in sorted(topics):
        yield f"topic.{key}", topics[key]

seen, out, total = set(), [], 0
for ident, doc in docs():
    if not doc or len(doc) < 120 or doc in seen:
        continue
    seen.add(doc)
    text = re.sub(r"[ \t]+", " ", doc.encode("ascii", "ignore").decode()).strip()
    out.append({"id": ident, "lang": "en", "text": text})
    total += len(text)
    if total >= TARGET:
        break
with gzip.GzipFile("natural_en.jsonl.gz", "wb", mtime=0) as f:
    for d in out:
        f.write((json.dumps(d) + "\n").encode())
print(len(out), total)
