use std::sync::Arc;

use tokio::net::UdpSocket;
use tokio::sync::watch;

use super::Aggregator;
use crate::protocol::MAX_DATAGRAM;

/// Requested kernel receive buffer. A fleet's first heartbeats arrive in
/// one burst; the kernel caps the request at its configured maximum.
pub const RECV_BUFFER_BYTES: usize = 4 << 20;

/// Asks the kernel for a receive buffer of `bytes`; returns the size granted.
pub fn set_recv_buffer(socket: &UdpSocket, bytes: usize) -> std::io::Result<usize> {
    use std::os::fd::AsRawFd;
    let fd = socket.as_raw_fd();
    let want = libc::c_int::try_from(bytes).unwrap_or(libc::c_int::MAX);
    let len = std::mem::size_of::<libc::c_int>() as libc::socklen_t;
    // SAFETY: fd is a live socket owned by `socket`; the option values are plain ints of the stated length.
    unsafe {
        if libc::setsockopt(fd, libc::SOL_SOCKET, libc::SO_RCVBUF, (&want as *const libc::c_int).cast(), len) != 0 {
            return Err(std::io::Error::last_os_error());
        }
        let mut got: libc::c_int = 0;
        let mut got_len = len;
        if libc::getsockopt(fd, libc::SOL_SOCKET, libc::SO_RCVBUF, (&mut got as *mut libc::c_int).cast(), &mut got_len)
            != 0
        {
            return Err(std::io::Error::last_os_error());
        }
        Ok(got.max(0) as usize)
    }
}

/// Receives agent datagrams until `shutdown` flips. Receive errors (e.g.
/// ICMP unreachable bounced back on some platforms) are ignored.
pub async fn serve_udp(agg: Arc<Aggregator>, socket: UdpSocket, mut shutdown: watch::Receiver<bool>) {
    match set_recv_buffer(&socket, RECV_BUFFER_BYTES) {
        Ok(n) => tracing::debug!(bytes = n, "udp receive buffer"),
        Err(e) => tracing::warn!(error = %e, "cannot enlarge udp receive buffer"),
    }
    // one byte of headroom so oversize packets are seen as oversize, not truncated
    let mut buf = vec![0u8; MAX_DATAGRAM + 1];
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            r = socket.recv_from(&mut buf) => match r {
                Ok((n, _)) => agg.ingest_bytes(&buf[..n]),
                Err(e) => tracing::debug!(error = %e, "udp receive error"),
            }
        }
        if *shutdown.borrow() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn receive_buffer_grows() {
        let socket = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let before = set_recv_buffer(&socket, 0).unwrap();
        let after = set_recv_buffer(&socket, RECV_BUFFER_BYTES).unwrap();
        assert!(after > before, "{before} -> {after}");
    }
}
