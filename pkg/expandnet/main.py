from fastapi import FastAPI

from .Database import Base, engine
from .routers import runs

# Create FastAPI app
app = FastAPI(title="expandnet results")

# Create database tables
Base.metadata.create_all(bind=engine)

# Include routers
app.include_router(runs.router)


@app.get("/")
def root():
    """API root endpoint"""
    return {
        "message": "expandnet run registry API",
    }
