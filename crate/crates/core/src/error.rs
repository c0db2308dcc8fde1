pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown zone {zone} on machine {machine}")]
    UnknownZone { machine: u32, zone: u32 },

    #[error("registration capacity exceeded on machine {machine}")]
    RegistrationCap { machine: u32 },

    #[error("span out of range in region {region}: offset {offset} + len {len} > {cap}")]
    OutOfRange {
        region: u32,
        offset: u64,
        len: u64,
        cap: u64,
    },

    /// The device fault oracle: too many consecutive unsignaled posts on one
    /// queue pair. A correct transmitter never triggers this.
    #[error("queue pair {qp}: {streak} unsignaled posts exceed u_max {u_max}")]
    QpOverflow { qp: u32, streak: u32, u_max: u32 },

    #[error("queue pair {qp}: peer send backlog full")]
    SendBacklog { qp: u32 },

    #[error("recv buffer too small: inbound {len} bytes, buffer holds {cap}")]
    RecvTooSmall { len: u32, cap: u32 },

    #[error("{0} allocator exhausted")]
    Alloc(&'static str),

    /// Exhausted until in-flight transmissions complete; flush and retry.
    #[error("would block")]
    WouldBlock,

    #[error("record of {len} bytes exceeds capacity {cap}")]
    Oversize { len: u64, cap: u64 },

    #[error("function id {0} is not registered")]
    UnknownFunction(u64),

    #[error("function registry: {0}")]
    Registry(String),

    #[error("channel is shut down")]
    ChannelClosed,

    #[error("channel fault: {0}")]
    ChannelFault(String),

    #[error("malformed record: {0}")]
    BadRecord(String),

    #[error("config: {0}")]
    Config(String),

    #[error("timed out waiting for {0}")]
    Timeout(&'static str),

    #[error("stream backend: {0}")]
    Stream(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Stream(e.to_string())
    }
}
