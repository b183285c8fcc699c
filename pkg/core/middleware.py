from fastapi.middleware.cors import CORSMiddleware
from core.settings import settings
import logging

logger = logging.getLogger(__name__)


def setup_cors_middleware(app):
    app.add_middleware(
        CORSMiddleware,
        allow_origins=settings.allowed_origins,
        allow_credentials=False,
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )


def setup_middleware(app):
    setup_cors_middleware(app)
    logger.info("CORS middleware configured")
