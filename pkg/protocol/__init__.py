from .codec import decode, encode
from .messages import (
    CAPABILITIES,
    DEFAULT_PORT,
    MALFORMED_FRAME_ID,
    PROTOCOL_VERSION,
    ProtocolError,
    Request,
    RequestKind,
    Response,
    ResponseStatus,
    error_payload,
)
from .session import Exchange, HandshakeRefused, HostSession, SessionPoisoned, TransferError, alternation_holds
from .transport import ChannelClosed, FrameChannel, MemoryChannel, StreamChannel, memory_channel_pair, open_tcp_channel
