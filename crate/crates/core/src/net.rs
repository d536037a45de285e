//! IPv4 address ranges, published-port mappings and `sockaddr_in` encoding.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("invalid CIDR {0:?}")]
    Cidr(String),
    #[error("invalid publish spec {0:?} (want [HOST_ADDR:]HOST_PORT:CONTAINER_PORT)")]
    Publish(String),
}

/// An IPv4 network in prefix notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ipv4Cidr {
    addr: Ipv4Addr,
    prefix: u8,
}

impl Ipv4Cidr {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Option<Self> {
        if prefix > 32 {
            return None;
        }
        let masked = Ipv4Addr::from(u32::from(addr) & Self::mask_of(prefix));
        Some(Self { addr: masked, prefix })
    }

    fn mask_of(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn network(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask_of(self.prefix) == u32::from(self.addr)
    }

    pub fn overlaps(&self, other: &Ipv4Cidr) -> bool {
        let p = self.prefix.min(other.prefix);
        let m = Self::mask_of(p);
        u32::from(self.addr) & m == u32::from(other.addr) & m
    }
}

impl FromStr for Ipv4Cidr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseError::Cidr(s.to_string());
        let (ip, prefix) = match s.split_once('/') {
            Some((ip, p)) => (ip, p.parse::<u8>().map_err(|_| err())?),
            None => (s, 32),
        };
        let ip: Ipv4Addr = ip.parse().map_err(|_| err())?;
        Ipv4Cidr::new(ip, prefix).ok_or_else(err)
    }
}

impl TryFrom<String> for Ipv4Cidr {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ipv4Cidr> for String {
    fn from(c: Ipv4Cidr) -> String {
        c.to_string()
    }
}

impl fmt::Display for Ipv4Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

/// A container port exposed on a host port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublishMapping {
    pub container_addr: Ipv4Addr,
    pub container_port: u16,
    pub host_addr: Ipv4Addr,
    pub host_port: u16,
}

impl PublishMapping {
    /// Parses `HOST_PORT:CONTAINER_PORT` or `HOST_ADDR:HOST_PORT:CONTAINER_PORT`.
    ///
    /// `container_addr` comes from the container's own configuration since
    /// the flag syntax does not carry it.
    pub fn parse(spec: &str, container_addr: Ipv4Addr) -> Result<Self, ParseError> {
        let err = || ParseError::Publish(spec.to_string());
        let spec_body = spec.strip_suffix("/tcp").unwrap_or(spec);
        let parts: Vec<&str> = spec_body.split(':').collect();
        let (host_addr, host_port, container_port) = match parts.as_slice() {
            [h, c] => (Ipv4Addr::UNSPECIFIED, *h, *c),
            [a, h, c] => (a.parse().map_err(|_| err())?, *h, *c),
            _ => return Err(err()),
        };
        let host_port: u16 = host_port.parse().map_err(|_| err())?;
        let container_port: u16 = container_port.parse().map_err(|_| err())?;
        if host_port == 0 || container_port == 0 {
            return Err(err());
        }
        Ok(Self { container_addr, container_port, host_addr, host_port })
    }

    pub fn container_endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.container_addr, self.container_port)
    }

    /// Address a client on this host should connect to in order to reach
    /// the host-side listener.
    pub fn host_connect_endpoint(&self) -> SocketAddrV4 {
        let ip = if self.host_addr.is_unspecified() { Ipv4Addr::LOCALHOST } else { self.host_addr };
        SocketAddrV4::new(ip, self.host_port)
    }

    pub fn host_bind_endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.host_addr, self.host_port)
    }
}

pub const SOCKADDR_IN_LEN: usize = std::mem::size_of::<libc::sockaddr_in>();

/// Decoded socket address as read from target memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SockAddr {
    Inet(SocketAddrV4),
    Inet6,
    Other(u16),
}

/// Decodes the leading bytes of a `struct sockaddr`.
pub fn decode_sockaddr(bytes: &[u8]) -> Option<SockAddr> {
    if bytes.len() < 2 {
        return None;
    }
    let family = u16::from_ne_bytes([bytes[0], bytes[1]]);
    match family as i32 {
        libc::AF_INET => {
            if bytes.len() < 8 {
                return None;
            }
            let port = u16::from_be_bytes([bytes[2], bytes[3]]);
            let ip = Ipv4Addr::new(bytes[4], bytes[5], bytes[6], bytes[7]);
            Some(SockAddr::Inet(SocketAddrV4::new(ip, port)))
        }
        libc::AF_INET6 => Some(SockAddr::Inet6),
        other => Some(SockAddr::Other(other as u16)),
    }
}

/// Encodes a `sockaddr_in` exactly as the kernel lays it out.
pub fn encode_sockaddr_in(addr: SocketAddrV4) -> [u8; SOCKADDR_IN_LEN] {
    let mut out = [0u8; SOCKADDR_IN_LEN];
    out[0..2].copy_from_slice(&(libc::AF_INET as u16).to_ne_bytes());
    out[2..4].copy_from_slice(&addr.port().to_be_bytes());
    out[4..8].copy_from_slice(&addr.ip().octets());
    out
}

pub fn to_libc_sockaddr(addr: SocketAddrV4) -> libc::sockaddr_in {
    libc::sockaddr_in {
        sin_family: libc::AF_INET as libc::sa_family_t,
        sin_port: addr.port().to_be(),
        sin_addr: libc::in_addr { s_addr: u32::from_ne_bytes(addr.ip().octets()) },
        sin_zero: [0; 8],
    }
}
