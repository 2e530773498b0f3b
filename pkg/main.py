from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
import uvicorn
import logging

from app.core.config import settings
from app.core.dataset_store import dataset_store
from app.api.routes import datasets, fitting

# Configure logging
logging.basicConfig(level=settings.LOG_LEVEL)
logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup - open the served dataset when one is configured
    if settings.get_dataset_root() is not None:
        try:
            dataset_store.open()
        except Exception as e:
            logger.warning(f"Dataset not available at startup: {e}")
    logger.info(f"{settings.APP_NAME} API started")
    yield
    dataset_store.close()
    logger.info(f"{settings.APP_NAME} API stopped")

app = FastAPI(
    title="DenseFit API",
    description="Dense render-and-compare body fitting: browse generated datasets and fit IUV targets",
    version="1.0.0",
    lifespan=lifespan
)

# CORS middleware for the dataset browser
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.ALLOWED_ORIGINS,
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)

app.include_router(datasets.router)
app.include_router(fitting.router)

@app.get("/")
async def root():
    return {"message": "DenseFit API", "version": "1.0.0"}

@app.get("/health/")
async def health_check():
    return {"status": "healthy", "service": "densefit-api"}

if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8001,
        reload=settings.DEBUG
    )
