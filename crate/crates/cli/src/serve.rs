use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use vizarel_server::{AppState, ServerConfig, SessionStatus};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub host: IpAddr,
    pub port: u16,
    pub data_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub load: Vec<PathBuf>,
    pub open: bool,
}

#[derive(Debug)]
pub struct ServeError {
    pub message: String,
    pub exit_code: i32,
}

impl ServeError {
    fn new(message: impl Into<String>, exit_code: i32) -> Self {
        Self {
            message: message.into(),
            exit_code,
        }
    }
}

/// Binds, pre-loads any `--load` logs, prints the listening URL and serves
/// until interrupted.
pub async fn run(options: ServeOptions) -> Result<(), ServeError> {
    let state = AppState::open(ServerConfig {
        data_dir: options.data_dir.clone(),
        ui_dir: options.ui_dir.clone(),
    })
    .map_err(|e| ServeError::new(format!("data directory: {e}"), 1))?;

    for path in &options.load {
        let (handle, _) = state
            .create_from_path(path, None)
            .map_err(|e| ServeError::new(format!("{}: {}", e.code, e.message), 1))?;
        let entry = state
            .session(&handle.session_id)
            .map_err(|e| ServeError::new(e.message, 1))?;
        while entry.status() == SessionStatus::Loading {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let handle = entry.handle();
        if let Some(err) = handle.report.error {
            return Err(ServeError::new(
                format!("{}: {}: {}", path.display(), err.code, err.message),
                1,
            ));
        }
        println!(
            "loaded {} as session {} ({} steps)",
            path.display(),
            handle.session_id,
            handle.report.ingest.steps_loaded
        );
    }

    let addr = SocketAddr::new(options.host, options.port);
    let listener = vizarel_server::bind(addr)
        .await
        .map_err(|e| ServeError::new(format!("cannot listen on {addr}: {e}"), 1))?;
    let local = listener
        .local_addr()
        .map_err(|e| ServeError::new(e.to_string(), 1))?;
    // A closed stdout must not take the service down.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "listening on http://{local}");
    if options.open {
        let _ = writeln!(out, "open http://{local}/ in a browser");
    }
    vizarel_server::serve(listener, state)
        .await
        .map_err(|e| ServeError::new(e.to_string(), 1))
}
