"""Wire format and channels for running federation rounds across processes or hosts."""

from .channels import (
    Channel,
    ChannelClosed,
    ChannelTimeout,
    InProcChannel,
    TcpChannel,
    TcpListener,
    connect,
    inproc_pair,
    parse_address,
)
from .frames import HEADER_SIZE, MAGIC, Kind, RoundMessage, decode, encode, payload_fields
from .session import FederationClient, FederationServer, remote_report, run_session, session_hyperparameters

__all__ = [
    "Channel", "ChannelClosed", "ChannelTimeout", "InProcChannel", "TcpChannel", "TcpListener", "connect",
    "inproc_pair", "parse_address", "HEADER_SIZE", "MAGIC", "Kind", "RoundMessage", "decode", "encode",
    "payload_fields", "FederationClient", "FederationServer", "remote_report", "run_session",
    "session_hyperparameters",
]
