//! Session persistence and the HTTP API consumed by the composition UI.

pub mod http;
pub mod session;

pub use http::{router, serve, ApiError, EditRequest, SegmentView, SessionView};
pub use session::{EditOutcome, Session, SessionError, SessionMeta, SessionStore};
