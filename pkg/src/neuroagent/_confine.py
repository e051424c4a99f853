"""Bootstrap that runs a Python script with writes confined to one directory.

Usage: python _confine.py ROOT SCRIPT [ARGS...]

An audit hook rejects any file write, creation, removal or rename whose target
resolves outside ROOT. Each rejection prints a ``[sandbox] WorkspaceViolation``
line on stderr and raises PermissionError inside the script. Child processes
are not covered.
"""

import os
import runpy
import traceback
import sys

MARKER = "[sandbox] WorkspaceViolation:"

_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_TRUNC | os.O_APPEND
_PATH_EVENTS = {
    "os.mkdir": (0,),
    "os.remove": (0,),
    "os.rmdir": (0,),
    "os.rename": (0, 1),
    "os.replace": (0, 1),
    "os.link": (0, 1),
    "os.symlink": (1,),
    "os.truncate": (0,),
    "os.chmod": (0,),
    "os.chown": (0,),
    "os.utime": (0,),
    "shutil.rmtree": (0,),
    "shutil.move": (1,),
    "shutil.copyfile": (1,),
    "shutil.copytree": (1,),
}
_ALLOWED_DEVICES = {os.devnull, "/dev/stdout", "/dev/stderr"}


def install(root):
    root = os.path.realpath(root)

    def inside(path):
        if isinstance(path, int):
            return True
        if isinstance(path, bytes):
            path = os.fsdecode(path)
        path = os.fspath(path)
        if path in _ALLOWED_DEVICES:
            return True
        full = os.path.realpath(os.path.join(os.getcwd(), path))
        return full == root or full.startswith(root + os.sep)

    def reject(path):
        sys.stderr.write(f"{MARKER} {os.fspath(path) if not isinstance(path, int) else path}\n")
        sys.stderr.flush()
        raise PermissionError(f"WorkspaceViolation: write outside workspace: {path}")

    def hook(event, args):
        if event == "open":
            path, mode, flags = args
            if path is None:
                return
            writes = bool(mode) and any(c in str(mode) for c in "wax+")
            writes = writes or bool((flags or 0) & _WRITE_FLAGS)
            if writes and not inside(path):
                reject(path)
        elif event in _PATH_EVENTS:
            for i in _PATH_EVENTS[event]:
                if i < len(args) and args[i] is not None and not inside(args[i]):
                    reject(args[i])

    sys.addaudithook(hook)


def main():
    if len(sys.argv) < 3:
        sys.stderr.write("usage: _confine.py ROOT SCRIPT [ARGS...]\n")
        return 2
    root, script = sys.argv[1], sys.argv[2]
    sys.argv = [script] + sys.argv[3:]
    sys.path.insert(0, os.path.dirname(os.path.abspath(script)))
    install(root)
    try:
        runpy.run_path(script, run_name="__main__")
    except Exception as exc:
        # report the failure from the program's point of view, without bootstrap frames
        tb = exc.__traceback__
        while tb is not None and tb.tb_frame.f_code.co_filename != script:
            tb = tb.tb_next
        traceback.print_exception(type(exc), exc, tb or exc.__traceback__)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
