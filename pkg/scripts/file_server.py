import base64
import binascii
import hashlib
import os
from typing import Optional

import aiofiles
from smolagents import Tool

from agents.execution_root import AgentError, ExecutionRoot

HASH_BLOCK = 1024 * 1024


class TransferError(AgentError):
    pass


async def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    async with aiofiles.open(path, "rb") as fh:
        while True:
            block = await fh.read(HASH_BLOCK)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


class FileServerTool(Tool):
    name = "file_server"
    description = """
Write one chunk of a file pushed from the host.
Chunk 0 truncates the file, later chunks append. The final chunk carries the SHA-256 of the whole file,
which is checked against what landed on disk."""
# 日本語訳：
# ホストから送られたファイルのチャンクを1つ書き込みます。
# チャンク0でファイルを作り直し、以降のチャンクは追記します。
# 最後のチャンクにはファイル全体のSHA-256が付いており、書き込まれた内容と照合します。

    inputs = {
        "file_path": {
            "description": "Guest path of the file, confined to the execution root.",
            "type": "string",
        },
        "content": {
            "description": "Base64 chunk content.",
            "type": "string",
        },
        "index": {
            "description": "Chunk number, starting at 0.",
            "type": "integer",
        },
        "sha256": {
            "description": "[Optional]: Hash of the complete file, sent with the final chunk.",
            "type": "string",
            "nullable": True,
        },
    }
    output_type = "object"

    def __init__(self, root: ExecutionRoot):
        super().__init__()
        self.root = root

    async def forward(self, file_path: str, content: str, index: int, sha256: Optional[str] = None) -> dict:
        path = self.root.resolve(file_path)
        try:
            data = base64.b64decode(content, validate=True)
        except (binascii.Error, ValueError) as e:
            raise TransferError(f"chunk {index} is not valid base64: {e}") from None

        directory = os.path.dirname(path)
        if directory and not os.path.exists(directory):
            os.makedirs(directory)
        async with aiofiles.open(path, "wb" if index == 0 else "ab") as file:
            await file.write(data)
        self.root.record_touch(path)

        result = {"path": str(path), "index": index, "bytes": os.path.getsize(path)}
        if sha256 is not None:
            actual = await file_sha256(str(path))
            if actual != sha256:
                raise TransferError(f"content hash mismatch for {file_path}: {actual} != {sha256}")
            result["content_hash"] = actual
        return result


async def read_chunk(root: ExecutionRoot, file_path: str, offset: int, length: int) -> dict:
    """One base64 chunk of a guest file; the last chunk reports eof and the file hash."""
    path = root.resolve(file_path)
    size = os.path.getsize(path)
    async with aiofiles.open(path, "rb") as file:
        await file.seek(offset)
        data = await file.read(length)
    eof = offset + len(data) >= size
    result = {"data": base64.b64encode(data).decode("ascii"), "offset": offset, "size": size, "eof": eof}
    if eof:
        result["sha256"] = await file_sha256(str(path))
    return result
