"""Writes the bundled 50-snippet C mini-corpus (deterministic)."""
import json
import random
import sys

rng = random.Random(123456)

TYPES = ["int", "static int", "void", "static void", "size_t", "char *", "uint32_t"]
NAMES = ["parse_header", "read_packet", "av_decode_frame", "qemu_put_buffer",
         "copy_string", "handle_request", "init_context", "free_buffer",
         "process_chunk", "validate_input", "ff_get_bits", "vnc_client_read"]
ARGS = ["const uint8_t *buf, int len", "AVCodecContext *avctx, void *data",
        "char *dst, const char *src", "struct ctx *c", "void",
        "QEMUFile *f, int size", "int fd, size_t n"]
DECLS = ["int i;", "int ret = 0;", "size_t n = len;", "char tmp[64];",
         "uint8_t *p = buf;", "int  err  =  -1;", "AVFrame *frame = NULL;",
         "const char *end;"]
BODY = ["memcpy(dst, src, n);", "ret = read_bits(p, 8);", "if (!p)\n{IND}return -1;",
        "n -= 4;", "p += n;", "strcpy(tmp, src);", "free(frame);",
        "for (i = 0; i < len; i++) {\n{IND}sum += buf[i];\n}",
        "while (n > 0)\n{IND}n--;", "ret = av_frame_ref(frame, src_frame);",
        "if (ret < 0) {\n{IND}av_log(avctx, AV_LOG_ERROR, \"decode failed\\n\");\n{IND}goto fail;\n}",
        "/* check bounds */", "assert(len >= 0);", "c->state = STATE_IDLE;"]


def function(idx):
    ind = rng.choice(["    ", "\t", "  "])
    lines = [f"{rng.choice(TYPES)} {rng.choice(NAMES)}_{idx}({rng.choice(ARGS)})"]
    if rng.random() < 0.5:
        lines[0] += " {"
    else:
        lines.append("{")
    for _ in range(rng.randint(1, 4)):
        lines.append(ind + rng.choice(DECLS))
    if rng.random() < 0.6:
        lines.append("")
    for _ in range(rng.randint(2, 14)):
        stmt = rng.choice(BODY).replace("{IND}", ind)
        for j, part in enumerate(stmt.split("\n")):
            lines.append(ind + part)
        if rng.random() < 0.15:
            lines.append("")
        if rng.random() < 0.1:
            lines[-1] += "   "
    lines.append(ind + "return ret;")
    lines.append("}")
    text = "\n".join(lines)
    if rng.random() < 0.5:
        text += "\n"
    return text


def collapse(s):
    return " ".join(s.split())


def main():
    out = sys.argv[1]
    rows = []
    for i in range(50):
        func = function(i)
        rows.append({"idx": i, "func": func, "target": rng.randint(0, 1)})
    with open(out, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    # independent recount: bytes under each normalization, lines after splitting on '\n'
    s = [len(r["func"].encode()) for r in rows]
    b = [len(collapse(r["func"]).encode()) for r in rows]
    def nlines(t):
        parts = t.split("\n")
        if parts and parts[-1] == "":
            parts.pop()
        return len(parts)
    l = [nlines(r["func"]) for r in rows]
    print("structured sum", sum(s), "mean", repr(sum(s) / 50))
    print("baseline sum", sum(b), "mean", repr(sum(b) / 50))
    print("ratio", repr((sum(b) / 50) / (sum(s) / 50)))
    print("lines sum", sum(l), "mean", repr(sum(l) / 50))
    for lim in (1, 128, 256, 1024):
        print("over", lim, sum(1 for x in s if x > lim))


main()
