use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// An overlay participant. Identities are never reused: a node that
    /// crashes and "comes back" does so under a fresh id.
    NodeId, u32, "n"
);
id_type!(
    /// A physical router.
    RouterId, u32, "r"
);
id_type!(
    /// An end host attached to a stub router; overlay nodes run on hosts.
    HostId, u32, "h"
);
id_type!(
    /// A single tunnel instance. A tunnel torn down and re-created between the
    /// same pair of nodes gets a new id.
    TunnelId, u64, "t"
);

/// Globally unique multicast message identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    pub source: NodeId,
    pub seq: u64,
}

impl MessageId {
    pub fn new(source: NodeId, seq: u64) -> Self {
        MessageId { source, seq }
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.source, self.seq)
    }
}
