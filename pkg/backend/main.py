"""
Main entry point for the fine-tuning lab API
"""
import os

import uvicorn

if __name__ == "__main__":
    uvicorn.run(
        "app.api:app",
        host=os.environ.get("HRF_API_HOST", "127.0.0.1"),
        port=int(os.environ.get("HRF_API_PORT", "8000")),
        reload=os.environ.get("HRF_API_RELOAD", "0") == "1",
        log_level="info",
    )
