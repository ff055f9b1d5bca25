//! Network side of the hub: the framed TCP server, producer and subscriber
//! clients, a networked experiment link and the WebSocket monitor bridge.

pub mod bridge;
pub mod client;
pub mod link;
pub mod server;

pub use bridge::{spawn_bridge, BridgeConfig, BridgeHandle, DEFAULT_BRIDGE_PORT};
pub use client::{ClientError, ProducerClient, ShiftedClock, SubscriberClient};
pub use link::RemoteLink;
pub use server::{spawn_server, ServerConfig, ServerHandle};
