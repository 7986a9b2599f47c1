import asyncio
import logging
import shlex
import time
from datetime import datetime, timezone
from typing import Optional

from smolagents import Tool

from agents.execution_root import AgentError, ExecutionRoot

logger = logging.getLogger(__name__)

MAX_STREAM_BYTES = 1024 * 1024
_READ_SIZE = 64 * 1024

_COMMAND_DESCRIPTION = """Run a command inside the guest.
* shell=true runs the text through /bin/sh; shell=false splits it into an argument vector.
* In sandbox mode the working directory is the sandbox root and the environment is reduced to a fixed allowlist.
* stdout and stderr are each kept up to 1 MiB; anything beyond is dropped and flagged as truncated.
* A nonzero exit code is reported, not raised.
"""

# 日本語訳:
# """ゲスト内でコマンドを実行します。
# * shell=true の場合は /bin/sh 経由で実行し、shell=false の場合は引数リストに分割して実行します。
# * サンドボックスモードでは作業ディレクトリはサンドボックスのルートになり、環境変数は固定の許可リストに絞られます。
# * stdout と stderr はそれぞれ最大 1 MiB まで保持し、それを超えた分は切り捨ててフラグを立てます。
# * 0 以外の終了コードは例外ではなく結果として返します。
# """


class CommandSpawnError(AgentError):
    pass


async def _drain(stream: asyncio.StreamReader, cap: int):
    kept = bytearray()
    truncated = False
    while True:
        chunk = await stream.read(_READ_SIZE)
        if not chunk:
            break
        room = cap - len(kept)
        if room > 0:
            kept.extend(chunk[:room])
        if len(chunk) > max(room, 0):
            truncated = True
    return bytes(kept), truncated


class CommandTool(Tool):
    """Runs one command to completion and captures its output."""

    name = "run_command"
    description = _COMMAND_DESCRIPTION
    inputs = {
        "command": {
            "description": "The rendered command text.",
            "type": "string",
        },
        "shell": {
            "description": "[Optional]: Whether to run through the shell. Default is True.",
            "type": "boolean",
            "nullable": True,
        },
    }
    output_type = "object"

    def __init__(self, root: ExecutionRoot, max_stream_bytes: int = MAX_STREAM_BYTES):
        super().__init__()
        self.root = root
        self.max_stream_bytes = max_stream_bytes

    async def forward(self, command: str, shell: Optional[bool] = True) -> dict:
        started_at = datetime.now(timezone.utc).isoformat()
        start = time.perf_counter()
        options = dict(
            stdin=asyncio.subprocess.DEVNULL,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE,
            cwd=self.root.cwd,
            env=self.root.command_env(),
            start_new_session=True,
        )
        try:
            if shell is None or shell:
                process = await asyncio.create_subprocess_shell(command, **options)
            else:
                argv = shlex.split(command)
                if not argv:
                    raise CommandSpawnError("empty command")
                process = await asyncio.create_subprocess_exec(*argv, **options)
        except (OSError, ValueError) as e:
            raise CommandSpawnError(f"cannot start {command!r}: {e}") from None

        (stdout, stdout_truncated), (stderr, stderr_truncated) = await asyncio.gather(
            _drain(process.stdout, self.max_stream_bytes),
            _drain(process.stderr, self.max_stream_bytes),
        )
        exit_code = await process.wait()
        logger.debug("command exited with %d: %s", exit_code, command)
        return {
            "exit_code": exit_code,
            "stdout": stdout.decode("utf-8", errors="replace"),
            "stderr": stderr.decode("utf-8", errors="replace"),
            "stdout_truncated": stdout_truncated,
            "stderr_truncated": stderr_truncated,
            "started_at": started_at,
            "duration_ms": round((time.perf_counter() - start) * 1000, 3),
        }
